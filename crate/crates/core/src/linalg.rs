//! Small dense/sparse vector kernels used by the probe and MTL trainers.

use alloc::vec::Vec;

/// A feature row, dense or sparse (sorted `(index, value)` pairs).
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRow {
    Dense(Vec<f64>),
    Sparse(Vec<(usize, f64)>),
}

impl FeatureRow {
    pub fn dot(&self, w: &[f64]) -> f64 {
        match self {
            FeatureRow::Dense(x) => dot(x, w),
            FeatureRow::Sparse(x) => x.iter().map(|&(i, v)| v * w[i]).sum(),
        }
    }

    /// `w += scale * x`
    pub fn axpy_into(&self, scale: f64, w: &mut [f64]) {
        match self {
            FeatureRow::Dense(x) => {
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi += scale * xi;
                }
            }
            FeatureRow::Sparse(x) => {
                for &(i, v) in x {
                    w[i] += scale * v;
                }
            }
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        match self {
            FeatureRow::Dense(x) => x.clone(),
            FeatureRow::Sparse(x) => {
                let mut out = alloc::vec![0.0; dim];
                for &(i, v) in x {
                    out[i] = v;
                }
                out
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            FeatureRow::Dense(x) => x.iter().all(|v| v.is_finite()),
            FeatureRow::Sparse(x) => x.iter().all(|(_, v)| v.is_finite()),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// In-place numerically stable softmax.
pub fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = mean(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>());
    libm::sqrt(var)
}
