//! Portable seeded randomness.
//!
//! Every random draw in the workspace comes from a [`Stream`]: a ChaCha8
//! generator keyed by `ChaCha8Rng::seed_from_u64(seed)` (the PCG32 seed
//! expansion of `rand_core`) with its 64-bit ChaCha stream id set to
//! `(tag << 40) | index`. `tag` names the sub-generator (see [`tags`]) and
//! `index` is the item number (conversation, utterance, record) so items can
//! be generated independently and in parallel.
//!
//! Derived draws are defined on top of `next_u64` only, so another
//! implementation of ChaCha8 reproduces them exactly:
//!
//! * `uniform()` = `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `below(n)` = rejection sampling: draw `x` until `x < n * floor(2^64 / n)`
//!   (computed as `u64::MAX - u64::MAX % n` for the bound), return `x % n`.
//! * `normal()` = Box-Muller cosine branch, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`
//!   with two fresh uniforms per call.
//! * `shuffle` = Fisher-Yates from the last index down, `j = below(i + 1)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Sub-generator stream tags.
pub mod tags {
    pub const CONVERSATION: u64 = 1;
    pub const CORRUPTION: u64 = 2;
    pub const FEATURES: u64 = 3;
    pub const ATTENTION: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const MTL: u64 = 7;
    pub const INIT: u64 = 8;
}

const INDEX_BITS: u32 = 40;

pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, tag: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream((tag << INDEX_BITS) | (index & ((1 << INDEX_BITS) - 1)));
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    pub fn index(&mut self, len: usize) -> usize {
        self.below(len as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.index(items.len())]
    }
}
