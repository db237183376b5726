//! Multi-task trunk over frozen features.
//!
//! One affine trunk (`input_dim -> width`) with an element-wise activation
//! feeds a linear head per task. Each optimizer step picks a task
//! (round-robin or proportional to train size), draws the next batch of
//! that task and updates the trunk and that task's head only. Task losses
//! are weighted uniformly. The returned model is the epoch snapshot with
//! the lowest mean validation loss over tasks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::FeatureRow;
use crate::model::Split;
use crate::probes::{featurize, fit, metrics_on, FeatureSource, LabeledRows, Metrics, ProbeModel, Target, TrainConfig};
use crate::rng::{tags, Stream};
use crate::taskgen::ProbeDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Identity => a,
            Activation::Tanh => libm::tanh(a),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `h`.
    fn slope(self, h: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `h = act(W x + b)`, `weights` row-major `width x input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub input_dim: usize,
    pub width: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Trunk {
    pub fn forward(&self, x: &FeatureRow) -> Vec<f64> {
        let d = self.input_dim;
        (0..self.width)
            .map(|k| self.activation.apply(x.dot(&self.weights[k * d..(k + 1) * d]) + self.bias[k]))
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        if self.weights.len() != self.width * self.input_dim || self.bias.len() != self.width {
            return Err(Error::ShapeMismatch(format!(
                "trunk {}x{} has {} weights and {} biases",
                self.width,
                self.input_dim,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlModel {
    pub trunk: Trunk,
    /// Task registry: one head per task over the trunk output.
    pub heads: BTreeMap<String, ProbeModel>,
}

impl MtlModel {
    pub fn features(&self, x: &FeatureRow) -> FeatureRow {
        FeatureRow::Dense(self.trunk.forward(x))
    }

    pub fn head(&self, task: &str) -> Option<&ProbeModel> {
        self.heads.get(task)
    }

    pub fn check(&self) -> Result<()> {
        self.trunk.check()?;
        for (name, h) in &self.heads {
            h.check()?;
            if h.input_dim != self.trunk.width {
                return Err(Error::ShapeMismatch(format!(
                    "head {name} expects dim {}, trunk width is {}",
                    h.input_dim, self.trunk.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    RoundRobin,
    Proportional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlConfig {
    pub width: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub sampling: Sampling,
    /// Trunk weights start as `N(0, init_scale^2 / input_dim)`; heads start at zero.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        Self {
            width: 256,
            activation: Activation::Tanh,
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.1,
            l2_penalty: 1e-4,
            sampling: Sampling::RoundRobin,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("width, epochs and batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite() && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("l2 penalty and init scale must be finite, l2 >= 0".into()));
        }
        Ok(())
    }
}

struct TaskState {
    name: String,
    train: LabeledRows,
    valid: LabeledRows,
    /// Regression targets are trained in standardised units.
    mu: f64,
    sd: f64,
    order: Vec<usize>,
    cursor: usize,
    passes: u64,
}

impl TaskState {
    fn standardize(&self, t: Target) -> Target {
        match t {
            Target::Value(v) => Target::Value((v - self.mu) / self.sd),
            c => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlEpoch {
    pub epoch: usize,
    /// Mean batch loss over the epoch's steps.
    pub train_loss: f64,
    /// Per-task mean validation loss, in task order.
    pub valid_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlRun {
    pub model: MtlModel,
    pub best_epoch: usize,
    pub history: Vec<MtlEpoch>,
}

/// Step-wise trainer behind [`train_mtl`].
pub struct MtlTrainer {
    config: MtlConfig,
    model: MtlModel,
    tasks: Vec<TaskState>,
    sampler: Stream,
    steps: u64,
    epoch: usize,
    history: Vec<MtlEpoch>,
    best: Option<(MtlModel, f64, usize)>,
}

impl MtlTrainer {
    pub fn new(datasets: &[&ProbeDataset], source: FeatureSource<'_>, config: &MtlConfig) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() {
            return Err(Error::InvalidConfig("no tasks given".into()));
        }
        let mut tasks = Vec::with_capacity(datasets.len());
        let mut heads = BTreeMap::new();
        let mut dim: Option<usize> = None;
        for ds in datasets {
            let f = featurize(ds, source)?;
            if f.get(Split::Train).is_empty() {
                return Err(Error::EmptySplit("train"));
            }
            match dim {
                None => dim = Some(f.dim),
                Some(d) if d != f.dim => {
                    return Err(Error::ShapeMismatch(format!(
                        "task {} has feature dim {}, expected {d}",
                        ds.task, f.dim
                    )))
                }
                _ => {}
            }
            if heads
                .insert(ds.task.clone(), ProbeModel::new(ds.label_set.clone(), config.width))
                .is_some()
            {
                return Err(Error::DuplicateKey(ds.task.clone()));
            }
            let [train, valid, _] = f.splits;
            let (mu, sd) = if ds.label_set.is_regression() {
                let ys: Vec<f64> = train
                    .targets
                    .iter()
                    .filter_map(|t| if let Target::Value(v) = t { Some(*v) } else { None })
                    .collect();
                let sd = crate::linalg::std_dev(&ys);
                (crate::linalg::mean(&ys), if sd > 0.0 { sd } else { 1.0 })
            } else {
                (0.0, 1.0)
            };
            let order = (0..train.len()).collect();
            tasks.push(TaskState {
                name: ds.task.clone(),
                train,
                valid,
                mu,
                sd,
                order,
                cursor: usize::MAX,
                passes: 0,
            });
        }
        let input_dim = dim.unwrap_or(0);
        let mut init = Stream::new(config.seed, tags::INIT, 0);
        let scale = config.init_scale / libm::sqrt(input_dim.max(1) as f64);
        let trunk = Trunk {
            input_dim,
            width: config.width,
            activation: config.activation,
            weights: (0..config.width * input_dim).map(|_| init.normal() * scale).collect(),
            bias: vec![0.0; config.width],
        };
        Ok(Self {
            config: config.clone(),
            model: MtlModel { trunk, heads },
            tasks,
            sampler: Stream::new(config.seed, tags::MTL, 0),
            steps: 0,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn task_names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }

    /// Current parameters with regression heads mapped back to target units.
    pub fn model(&self) -> MtlModel {
        let mut m = self.model.clone();
        for t in &self.tasks {
            if t.mu != 0.0 || t.sd != 1.0 {
                let h = m.heads.get_mut(&t.name).expect("registered");
                for w in &mut h.weights {
                    *w *= t.sd;
                }
                h.bias[0] = h.bias[0] * t.sd + t.mu;
            }
        }
        m
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| t.train.len().div_ceil(self.config.batch_size))
            .sum()
    }

    fn next_task(&mut self) -> usize {
        match self.config.sampling {
            Sampling::RoundRobin => (self.steps % self.tasks.len() as u64) as usize,
            Sampling::Proportional => {
                let total: usize = self.tasks.iter().map(|t| t.train.len()).sum();
                let mut r = self.sampler.below(total as u64) as usize;
                for (i, t) in self.tasks.iter().enumerate() {
                    if r < t.train.len() {
                        return i;
                    }
                    r -= t.train.len();
                }
                self.tasks.len() - 1
            }
        }
    }

    /// One update on the next scheduled task. Returns the task index and
    /// the batch loss.
    pub fn step(&mut self) -> Result<(usize, f64)> {
        let t = self.next_task();
        let loss = self.step_task(t)?;
        Ok((t, loss))
    }

    /// One update of the trunk and task `t`'s head on `t`'s next batch.
    pub fn step_task(&mut self, t: usize) -> Result<f64> {
        let batch = self.next_batch(t);
        let lr = self.config.learning_rate;
        let l2 = self.config.l2_penalty;
        let task = &self.tasks[t];
        let trunk = &self.model.trunk;
        let head = &self.model.heads[&task.name];
        let (d, w, k) = (trunk.input_dim, trunk.width, head.n_outputs());
        let n = batch.len() as f64;

        let mut g_tw = vec![0.0; w * d];
        let mut g_tb = vec![0.0; w];
        let mut g_hw = vec![0.0; k * w];
        let mut g_hb = vec![0.0; k];
        let mut loss = 0.0;
        for &i in &batch {
            let x = &task.train.rows[i];
            let h = trunk.forward(x);
            let hrow = FeatureRow::Dense(h);
            let (l, dz) = head.output_gradient(&hrow, task.standardize(task.train.targets[i]));
            let FeatureRow::Dense(h) = hrow else { unreachable!() };
            loss += l;
            let mut dh = vec![0.0; w];
            for (j, &g) in dz.iter().enumerate() {
                let hw = &head.weights[j * w..(j + 1) * w];
                for u in 0..w {
                    g_hw[j * w + u] += g * h[u] / n;
                    dh[u] += g * hw[u];
                }
                g_hb[j] += g / n;
            }
            for u in 0..w {
                let da = dh[u] * trunk.activation.slope(h[u]) / n;
                if da != 0.0 {
                    x.axpy_into(da, &mut g_tw[u * d..(u + 1) * d]);
                    g_tb[u] += da;
                }
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                learning_rate: lr,
            });
        }
        let name = task.name.clone();
        let trunk = &mut self.model.trunk;
        for (p, g) in trunk.weights.iter_mut().zip(&g_tw) {
            *p -= lr * (g + l2 * *p);
        }
        for (p, g) in trunk.bias.iter_mut().zip(&g_tb) {
            *p -= lr * g;
        }
        let head = self.model.heads.get_mut(&name).expect("registered");
        for (p, g) in head.weights.iter_mut().zip(&g_hw) {
            *p -= lr * (g + l2 * *p);
        }
        for (p, g) in head.bias.iter_mut().zip(&g_hb) {
            *p -= lr * g;
        }
        self.steps += 1;
        Ok(loss)
    }

    fn next_batch(&mut self, t: usize) -> Vec<usize> {
        let bs = self.config.batch_size;
        let seed = self.config.seed;
        let task = &mut self.tasks[t];
        if task.cursor >= task.order.len() {
            task.order.sort_unstable();
            Stream::new(seed, tags::MTL, 1 + ((t as u64) << 32) + task.passes).shuffle(&mut task.order);
            task.passes += 1;
            task.cursor = 0;
        }
        let end = (task.cursor + bs).min(task.order.len());
        let out = task.order[task.cursor..end].to_vec();
        task.cursor = end;
        out
    }

    /// Mean unpenalised validation loss per task (NaN for tasks without
    /// validation rows).
    pub fn validation_losses(&self) -> Vec<f64> {
        self.tasks
            .iter()
            .map(|task| {
                if task.valid.is_empty() {
                    return f64::NAN;
                }
                let head = &self.model.heads[&task.name];
                let total: f64 = task
                    .valid
                    .rows
                    .iter()
                    .zip(&task.valid.targets)
                    .map(|(x, &y)| {
                        head.output_gradient(&self.model.features(x), task.standardize(y)).0
                    })
                    .sum();
                total / task.valid.len() as f64
            })
            .collect()
    }

    /// Runs one epoch of `steps_per_epoch` updates and updates the best snapshot.
    pub fn run_epoch(&mut self) -> Result<MtlEpoch> {
        let steps = self.steps_per_epoch();
        let mut total = 0.0;
        for _ in 0..steps {
            total += self.step()?.1;
        }
        let valid_loss = self.validation_losses();
        let known: Vec<f64> = valid_loss.iter().copied().filter(|v| !v.is_nan()).collect();
        // Without validation data the latest epoch wins.
        let score = crate::linalg::mean(&known);
        let better = match &self.best {
            None => true,
            Some((_, s, _)) => known.is_empty() || score < *s,
        };
        if better {
            self.best = Some((self.model(), score, self.epoch));
        }
        let e = MtlEpoch {
            epoch: self.epoch,
            train_loss: total / steps.max(1) as f64,
            valid_loss,
        };
        self.history.push(e.clone());
        self.epoch += 1;
        Ok(e)
    }

    pub fn finish(self) -> MtlRun {
        let fallback = self.best.is_none().then(|| self.model());
        let (model, _, best_epoch) = match self.best {
            Some(b) => b,
            None => (fallback.expect("computed above"), 0.0, 0),
        };
        MtlRun {
            model,
            best_epoch,
            history: self.history,
        }
    }
}

pub fn train_mtl(datasets: &[&ProbeDataset], source: FeatureSource<'_>, config: &MtlConfig) -> Result<MtlRun> {
    let mut trainer = MtlTrainer::new(datasets, source, config)?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMode {
    /// Train a fresh head on the external train split over frozen trunk features.
    FrozenTrunkNewHead,
    /// Evaluate the existing head registered under the external task's name.
    FrozenEverything,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::FrozenTrunkNewHead => "frozen_trunk_new_head",
            TransferMode::FrozenEverything => "frozen_everything",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen_trunk_new_head" => Some(TransferMode::FrozenTrunkNewHead),
            "frozen_everything" => Some(TransferMode::FrozenEverything),
            _ => None,
        }
    }
}

fn trunk_rows(model: &MtlModel, rows: &LabeledRows) -> LabeledRows {
    LabeledRows {
        rows: rows.rows.iter().map(|x| model.features(x)).collect(),
        targets: rows.targets.clone(),
    }
}

/// Test-split metrics of `external` through the frozen trunk.
pub fn evaluate_transfer(
    model: &MtlModel,
    external: &ProbeDataset,
    source: FeatureSource<'_>,
    mode: TransferMode,
    head_config: &TrainConfig,
) -> Result<Metrics> {
    let f = featurize(external, source)?;
    if f.dim != model.trunk.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "external features have dim {}, trunk expects {}",
            f.dim, model.trunk.input_dim
        )));
    }
    let test = trunk_rows(model, f.get(Split::Test));
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let head = match mode {
        TransferMode::FrozenEverything => model
            .head(&external.task)
            .filter(|h| h.label_set == external.label_set)
            .cloned()
            .ok_or_else(|| {
                Error::IncompatibleHead(format!("no head for task {} with matching labels", external.task))
            })?,
        TransferMode::FrozenTrunkNewHead => {
            let train = trunk_rows(model, f.get(Split::Train));
            let valid = trunk_rows(model, f.get(Split::Valid));
            fit(&external.label_set, model.trunk.width, &train, &valid, head_config)?.0
        }
    };
    Ok(metrics_on(&head, &test))
}
