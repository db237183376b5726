//! Linear probes over frozen features.
//!
//! Classification heads minimise mean softmax cross-entropy, regression heads
//! mean `0.5 * (pred - y)^2`. Both add `0.5 * l2 * |W|^2` (bias excluded).
//! Training is plain mini-batch gradient descent from zero weights with a
//! seeded shuffle per epoch, keeping the parameters of the best validation
//! epoch (macro-F1, or MAE for regression). Regression targets are
//! standardised during training and the scaling is folded back into the
//! returned weights.
//!
//! Defaults (20 epochs, batch 32, learning rate 0.1, l2 1e-4) assume roughly
//! unit-variance features.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{argmax, mean, softmax, std_dev, FeatureRow};
use crate::model::{Label, ProbeInstance, Split};
use crate::rng::{tags, Stream};
use crate::store::{RecordKind, TensorStore};
use crate::taskgen::{LabelSet, ProbeDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    SoftmaxClassifier,
    LinearRegressor,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::SoftmaxClassifier => "softmax_classifier",
            ProbeKind::LinearRegressor => "linear_regressor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax_classifier" => Some(ProbeKind::SoftmaxClassifier),
            "linear_regressor" => Some(ProbeKind::LinearRegressor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// Affine probe head. `weights` is row-major `n_outputs x input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub kind: ProbeKind,
    pub input_dim: usize,
    pub label_set: LabelSet,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeModel {
    /// Zero-initialised head for `label_set`.
    pub fn new(label_set: LabelSet, input_dim: usize) -> Self {
        let kind = if label_set.is_regression() {
            ProbeKind::LinearRegressor
        } else {
            ProbeKind::SoftmaxClassifier
        };
        let k = label_set.len();
        Self {
            kind,
            input_dim,
            label_set,
            weights: vec![0.0; k * input_dim],
            bias: vec![0.0; k],
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.bias.len()
    }

    /// Checks dimensions and finiteness.
    pub fn check(&self) -> Result<()> {
        let k = self.label_set.len();
        if self.bias.len() != k || self.weights.len() != k * self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "probe with {k} outputs over dim {} has {} weights and {} biases",
                self.input_dim,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if (self.kind == ProbeKind::LinearRegressor) != self.label_set.is_regression() {
            return Err(Error::InvalidConfig("probe kind does not match label set".into()));
        }
        if !self.is_finite() {
            return Err(Error::InvalidConfig("non-finite probe parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Logits (classifier) or the single prediction (regressor).
    pub fn outputs(&self, x: &FeatureRow) -> Vec<f64> {
        let d = self.input_dim;
        (0..self.n_outputs())
            .map(|k| x.dot(&self.weights[k * d..(k + 1) * d]) + self.bias[k])
            .collect()
    }

    pub fn probabilities(&self, x: &FeatureRow) -> Vec<f64> {
        let mut z = self.outputs(x);
        softmax(&mut z);
        z
    }

    pub fn predict_class(&self, x: &FeatureRow) -> usize {
        argmax(&self.outputs(x))
    }

    pub fn predict_value(&self, x: &FeatureRow) -> f64 {
        self.outputs(x)[0]
    }

    /// Per-example loss and its gradient with respect to the outputs.
    pub fn output_gradient(&self, x: &FeatureRow, target: Target) -> (f64, Vec<f64>) {
        let mut z = self.outputs(x);
        match target {
            Target::Class(y) => {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>());
                let loss = lse - z[y];
                softmax(&mut z);
                z[y] -= 1.0;
                (loss, z)
            }
            Target::Value(y) => {
                let r = z[0] - y;
                (0.5 * r * r, vec![r])
            }
        }
    }

    /// Flattened parameters: weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let nw = self.weights.len();
        if p.len() != nw + self.bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                nw + self.bias.len(),
                p.len()
            )));
        }
        self.weights.copy_from_slice(&p[..nw]);
        self.bias.copy_from_slice(&p[nw..]);
        Ok(())
    }

    pub fn weight_norm(&self) -> f64 {
        libm::sqrt(self.weights.iter().map(|w| w * w).sum())
    }
}

/// Mean penalised loss over `rows` and its gradient in [`ProbeModel::params`] order.
pub fn loss_and_grad(
    model: &ProbeModel,
    rows: &[FeatureRow],
    targets: &[Target],
    l2: f64,
) -> (f64, Vec<f64>) {
    let d = model.input_dim;
    let k = model.n_outputs();
    let mut grad = vec![0.0; k * d + k];
    let mut loss = 0.0;
    let n = rows.len().max(1) as f64;
    for (x, &t) in rows.iter().zip(targets) {
        let (l, dz) = model.output_gradient(x, t);
        loss += l;
        for (j, g) in dz.iter().enumerate() {
            x.axpy_into(g / n, &mut grad[j * d..(j + 1) * d]);
            grad[k * d + j] += g / n;
        }
    }
    loss /= n;
    loss += 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in grad.iter_mut().zip(&model.weights) {
        *g += l2 * w;
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.1,
            l2_penalty: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::InvalidConfig("l2 penalty must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub mae: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub n: usize,
}

impl Metrics {
    /// Per-class precision/recall/F1 over every class of `labels`; F1 is 0
    /// when precision + recall is 0.
    pub fn classification(gold: &[usize], pred: &[usize], labels: &[String]) -> Self {
        let k = labels.len();
        let mut tp = vec![0usize; k];
        let mut n_pred = vec![0usize; k];
        let mut n_gold = vec![0usize; k];
        for (&g, &p) in gold.iter().zip(pred) {
            n_gold[g] += 1;
            n_pred[p] += 1;
            if g == p {
                tp[g] += 1;
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let precision = ratio(tp[c], n_pred[c]);
                let recall = ratio(tp[c], n_gold[c]);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    label: labels[c].clone(),
                    precision,
                    recall,
                    f1,
                    support: n_gold[c],
                }
            })
            .collect();
        let n = gold.len();
        Self {
            macro_f1: Some(mean(&per_class.iter().map(|c| c.f1).collect::<Vec<_>>())),
            accuracy: Some(ratio(tp.iter().sum(), n)),
            mae: None,
            per_class,
            n,
        }
    }

    pub fn regression(gold: &[f64], pred: &[f64]) -> Self {
        let errs: Vec<f64> = gold.iter().zip(pred).map(|(g, p)| libm::fabs(g - p)).collect();
        Self {
            macro_f1: None,
            accuracy: None,
            mae: Some(mean(&errs)),
            per_class: Vec::new(),
            n: gold.len(),
        }
    }

    pub fn higher_is_better(&self) -> bool {
        self.mae.is_none()
    }

    /// Macro-F1, or MAE for regression.
    pub fn headline(&self) -> f64 {
        self.macro_f1.or(self.mae).unwrap_or(f64::NAN)
    }

    pub fn metric_name(&self) -> &'static str {
        if self.higher_is_better() {
            "macro_f1"
        } else {
            "mae"
        }
    }

    /// True if `self` is strictly better than `other` on the headline metric.
    pub fn beats(&self, other: &Metrics) -> bool {
        if self.higher_is_better() {
            self.headline() > other.headline()
        } else {
            self.headline() < other.headline()
        }
    }
}

/// Feature rows with their targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledRows {
    pub rows: Vec<FeatureRow>,
    pub targets: Vec<Target>,
}

impl LabeledRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: FeatureRow, target: Target) {
        self.rows.push(row);
        self.targets.push(target);
    }
}

/// Metrics of `model` on `data`; regression predictions are compared to
/// the raw targets.
pub fn metrics_on(model: &ProbeModel, data: &LabeledRows) -> Metrics {
    match &model.label_set {
        LabelSet::Classes(labels) => {
            let gold: Vec<usize> = data
                .targets
                .iter()
                .map(|t| match t {
                    Target::Class(c) => *c,
                    Target::Value(_) => usize::MAX,
                })
                .collect();
            let pred: Vec<usize> = data.rows.iter().map(|x| model.predict_class(x)).collect();
            Metrics::classification(&gold, &pred, labels)
        }
        LabelSet::Regression => {
            let gold: Vec<f64> = data
                .targets
                .iter()
                .map(|t| match t {
                    Target::Value(v) => *v,
                    Target::Class(c) => *c as f64,
                })
                .collect();
            let pred: Vec<f64> = data.rows.iter().map(|x| model.predict_value(x)).collect();
            Metrics::regression(&gold, &pred)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Option<Metrics>,
}

/// Trains a head on pre-featurised rows. Returns the best-validation
/// snapshot (ties keep the earlier epoch; with no validation rows, the last
/// epoch) and the per-epoch log.
pub fn fit(
    label_set: &LabelSet,
    input_dim: usize,
    train: &LabeledRows,
    valid: &LabeledRows,
    config: &TrainConfig,
) -> Result<(ProbeModel, Vec<EpochLog>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    for (t, c) in [(train, "train"), (valid, "valid")] {
        for target in &t.targets {
            let ok = match (label_set, target) {
                (LabelSet::Classes(l), Target::Class(c)) => *c < l.len(),
                (LabelSet::Regression, Target::Value(v)) => v.is_finite(),
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!("{c} target {target:?} does not fit label set")));
            }
        }
    }

    // Regression targets are standardised; the head is trained in z units.
    let (mu, sd) = match label_set {
        LabelSet::Regression => {
            let ys: Vec<f64> = train
                .targets
                .iter()
                .map(|t| if let Target::Value(v) = t { *v } else { 0.0 })
                .collect();
            let sd = std_dev(&ys);
            (mean(&ys), if sd > 0.0 { sd } else { 1.0 })
        }
        LabelSet::Classes(_) => (0.0, 1.0),
    };
    let z_targets: Vec<Target> = train
        .targets
        .iter()
        .map(|t| match *t {
            Target::Value(v) => Target::Value((v - mu) / sd),
            c => c,
        })
        .collect();
    let unscale = |m: &ProbeModel| -> ProbeModel {
        let mut out = m.clone();
        if label_set.is_regression() {
            for w in &mut out.weights {
                *w *= sd;
            }
            out.bias[0] = out.bias[0] * sd + mu;
        }
        out
    };

    let mut model = ProbeModel::new(label_set.clone(), input_dim);
    let mut best: Option<(ProbeModel, Metrics)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows_buf: Vec<FeatureRow> = Vec::with_capacity(config.batch_size);
    let mut tgt_buf: Vec<Target> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        Stream::new(config.seed, tags::TRAIN, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            rows_buf.clear();
            tgt_buf.clear();
            for &i in chunk {
                rows_buf.push(train.rows[i].clone());
                tgt_buf.push(z_targets[i]);
            }
            let (loss, grad) = loss_and_grad(&model, &rows_buf, &tgt_buf, config.l2_penalty);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
            let nw = model.weights.len();
            for (w, g) in model.weights.iter_mut().zip(&grad[..nw]) {
                *w -= config.learning_rate * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad[nw..]) {
                *b -= config.learning_rate * g;
            }
            total += loss;
            batches += 1;
        }
        if !model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                learning_rate: config.learning_rate,
            });
        }
        let snapshot = unscale(&model);
        let valid_metrics = (!valid.is_empty()).then(|| metrics_on(&snapshot, valid));
        log.push(EpochLog {
            epoch,
            train_loss: total / batches as f64,
            valid: valid_metrics.clone(),
        });
        match (&best, valid_metrics) {
            (None, Some(m)) => best = Some((snapshot, m)),
            (Some((_, b)), Some(m)) if m.beats(b) => best = Some((snapshot, m)),
            (_, None) => best = Some((snapshot, Metrics::regression(&[], &[]))),
            _ => {}
        }
    }
    let (model, _) = best.expect("at least one epoch");
    Ok((model, log))
}

/// Word n-gram vocabulary with lexicographic feature indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramVocab {
    pub n_max: usize,
    pub index: BTreeMap<String, usize>,
}

/// Tokens on each side of the focus token used by token-level n-gram features.
pub const NGRAM_WINDOW: usize = 2;

/// Word n-gram counts for n = 1..=n_max, keyed by the space-joined n-gram.
pub fn ngram_counts(text: &str, n_max: usize) -> BTreeMap<String, f64> {
    let words: Vec<&str> = text.split_whitespace().collect();
    counts_of(&words, n_max)
}

fn counts_of(words: &[&str], n_max: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for n in 1..=n_max.min(words.len()) {
        for w in words.windows(n) {
            *out.entry(w.join(" ")).or_insert(0.0) += 1.0;
        }
    }
    out
}

fn instance_counts(inst: &ProbeInstance, n_max: usize) -> BTreeMap<String, f64> {
    match inst.position {
        None => ngram_counts(&inst.text, n_max),
        Some(p) => {
            let words: Vec<&str> = inst.text.split_whitespace().collect();
            let lo = p.saturating_sub(NGRAM_WINDOW);
            let hi = (p + NGRAM_WINDOW + 1).min(words.len());
            let mut c = counts_of(&words[lo.min(hi)..hi], n_max);
            if let Some(w) = words.get(p) {
                c.insert(format!("focus={w}"), 1.0);
            }
            c
        }
    }
}

impl NgramVocab {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, n_max: usize) -> Self {
        let mut keys = alloc::collections::BTreeSet::new();
        for t in texts {
            keys.extend(ngram_counts(t, n_max).into_keys());
        }
        Self::from_keys(keys, n_max)
    }

    /// Vocabulary over the train split. Token-level instances contribute
    /// n-grams from a window around `position` plus a focus-token feature.
    pub fn fit_dataset(dataset: &ProbeDataset, n_max: usize) -> Self {
        let mut keys = alloc::collections::BTreeSet::new();
        for inst in dataset.split(Split::Train) {
            keys.extend(instance_counts(inst, n_max).into_keys());
        }
        Self::from_keys(keys, n_max)
    }

    fn from_keys(keys: alloc::collections::BTreeSet<String>, n_max: usize) -> Self {
        Self {
            n_max,
            index: keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn row_from(&self, counts: BTreeMap<String, f64>) -> FeatureRow {
        let mut row: Vec<(usize, f64)> = counts
            .into_iter()
            .filter_map(|(k, v)| self.index.get(&k).map(|&i| (i, v)))
            .collect();
        row.sort_unstable_by_key(|&(i, _)| i);
        FeatureRow::Sparse(row)
    }

    /// Sparse counts of in-vocabulary n-grams; unseen n-grams are dropped.
    pub fn transform(&self, text: &str) -> FeatureRow {
        self.row_from(ngram_counts(text, self.n_max))
    }

    pub fn transform_instance(&self, inst: &ProbeInstance) -> FeatureRow {
        self.row_from(instance_counts(inst, self.n_max))
    }
}

/// Fits a vocabulary on `texts` and returns their sparse rows.
pub fn featurize_ngrams(texts: &[&str], n_max: usize) -> (Vec<FeatureRow>, NgramVocab) {
    let vocab = NgramVocab::fit(texts.iter().copied(), n_max);
    let rows = texts.iter().map(|t| vocab.transform(t)).collect();
    (rows, vocab)
}

#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    /// Utterance vectors, or token-matrix rows for instances with a position.
    Store { store: &'a TensorStore, layer: u32 },
    Ngrams(&'a NgramVocab),
}

impl FeatureSource<'_> {
    pub fn row(&self, inst: &ProbeInstance) -> Result<FeatureRow> {
        match *self {
            FeatureSource::Ngrams(v) => Ok(v.transform_instance(inst)),
            FeatureSource::Store { store, layer } => {
                let key = inst.feature_id();
                let values = match inst.position {
                    None => store
                        .utterance_vec(key, layer)
                        .map(|m| m.row(0))
                        .ok_or_else(|| {
                            Error::MissingFeature(format!("({key}, utterance_vec, layer {layer})"))
                        })?,
                    Some(p) => {
                        let m = store.token_mat(key, layer).ok_or_else(|| {
                            Error::MissingFeature(format!("({key}, token_mat, layer {layer})"))
                        })?;
                        if p >= m.rows {
                            return Err(Error::MissingFeature(format!(
                                "({key}, token_mat, layer {layer}) has {} rows, position {p}",
                                m.rows
                            )));
                        }
                        m.row(p)
                    }
                };
                Ok(FeatureRow::Dense(values.iter().map(|&v| v as f64).collect()))
            }
        }
    }

    pub fn dim_hint(&self) -> Option<usize> {
        match self {
            FeatureSource::Ngrams(v) => Some(v.len()),
            FeatureSource::Store { .. } => None,
        }
    }
}

pub fn target_of(dataset: &ProbeDataset, inst: &ProbeInstance) -> Result<Target> {
    let c = dataset.class_index(inst)?;
    Ok(match &inst.label {
        Label::Value(v) => Target::Value(*v),
        Label::Class(_) => Target::Class(c),
    })
}

/// Train, valid and test rows of a dataset plus their common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub dim: usize,
    pub splits: [LabeledRows; 3],
}

impl Featurized {
    pub fn get(&self, split: Split) -> &LabeledRows {
        &self.splits[split.index()]
    }
}

pub fn featurize(dataset: &ProbeDataset, source: FeatureSource<'_>) -> Result<Featurized> {
    let mut splits: [LabeledRows; 3] = Default::default();
    let mut dim = source.dim_hint();
    for inst in &dataset.instances {
        let row = source.row(inst)?;
        if let FeatureRow::Dense(v) = &row {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::ShapeMismatch(format!(
                        "feature for {} has dim {}, expected {d}",
                        inst.id,
                        v.len()
                    )))
                }
                _ => {}
            }
        }
        splits[inst.split.index()].push(row, target_of(dataset, inst)?);
    }
    Ok(Featurized {
        dim: dim.unwrap_or(0),
        splits,
    })
}

pub fn train_probe(
    dataset: &ProbeDataset,
    source: FeatureSource<'_>,
    config: &TrainConfig,
) -> Result<ProbeModel> {
    let f = featurize(dataset, source)?;
    let (model, _) = fit(
        &dataset.label_set,
        f.dim,
        f.get(Split::Train),
        f.get(Split::Valid),
        config,
    )?;
    Ok(model)
}

pub fn evaluate_probe(
    model: &ProbeModel,
    dataset: &ProbeDataset,
    split: Split,
    source: FeatureSource<'_>,
) -> Result<Metrics> {
    if model.label_set != dataset.label_set {
        return Err(Error::IncompatibleHead(format!(
            "model label set does not match task {}",
            dataset.task
        )));
    }
    let mut data = LabeledRows::default();
    for inst in dataset.split(split) {
        let row = source.row(inst)?;
        if let FeatureRow::Dense(v) = &row {
            if v.len() != model.input_dim {
                return Err(Error::ShapeMismatch(format!(
                    "feature for {} has dim {}, model expects {}",
                    inst.id,
                    v.len(),
                    model.input_dim
                )));
            }
        }
        data.push(row, target_of(dataset, inst)?);
    }
    if data.is_empty() {
        return Err(Error::EmptySplit(split.as_str()));
    }
    Ok(metrics_on(model, &data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub layer: u32,
    pub valid: Metrics,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub task: String,
    pub metric: String,
    pub per_layer: Vec<LayerResult>,
    pub best_layer: u32,
    /// Named score differences against other reports, e.g. `delta_domain`.
    pub deltas: BTreeMap<String, f64>,
}

impl ProbeReport {
    /// Picks the best layer by validation metric; ties go to the lower layer.
    pub fn from_layers(task: &str, mut per_layer: Vec<LayerResult>) -> Result<Self> {
        per_layer.sort_by_key(|r| r.layer);
        let first = per_layer.first().ok_or(Error::EmptySplit("layers"))?;
        let mut best = first;
        for r in &per_layer[1..] {
            if r.valid.beats(&best.valid) {
                best = r;
            }
        }
        Ok(Self {
            task: task.to_string(),
            metric: first.valid.metric_name().to_string(),
            best_layer: best.layer,
            per_layer: per_layer.clone(),
            deltas: BTreeMap::new(),
        })
    }

    pub fn best(&self) -> &LayerResult {
        self.per_layer
            .iter()
            .find(|r| r.layer == self.best_layer)
            .expect("best layer present")
    }

    /// Test score at the best layer.
    pub fn score(&self) -> f64 {
        self.best().test.headline()
    }

    /// Records `self.score() - baseline.score()` under `name`.
    pub fn add_delta(&mut self, name: &str, baseline: &ProbeReport) -> f64 {
        let d = self.score() - baseline.score();
        self.deltas.insert(name.to_string(), d);
        d
    }
}

/// Layers available for every instance of `dataset`; errors if instances
/// disagree.
pub fn dataset_layers(dataset: &ProbeDataset, store: &TensorStore) -> Result<Vec<u32>> {
    let token_level = dataset.instances.iter().any(|i| i.position.is_some());
    let kind = if token_level {
        RecordKind::TokenMat
    } else {
        RecordKind::UtteranceVec
    };
    let layers = store.layers(kind);
    if layers.is_empty() {
        return Err(Error::MissingFeature(format!("no {} records in store", kind.as_str())));
    }
    for inst in &dataset.instances {
        for &l in &layers {
            let present = match kind {
                RecordKind::TokenMat => store.token_mat(inst.feature_id(), l).is_some(),
                _ => store.utterance_vec(inst.feature_id(), l).is_some(),
            };
            if !present {
                return Err(Error::InconsistentLayers(format!(
                    "{} has no {} at layer {l} (store has layers {layers:?})",
                    inst.id,
                    kind.as_str()
                )));
            }
        }
    }
    Ok(layers)
}

pub fn probe_layer(
    dataset: &ProbeDataset,
    store: &TensorStore,
    layer: u32,
    config: &TrainConfig,
) -> Result<LayerResult> {
    let f = featurize(dataset, FeatureSource::Store { store, layer })?;
    let (model, _) = fit(
        &dataset.label_set,
        f.dim,
        f.get(Split::Train),
        f.get(Split::Valid),
        config,
    )?;
    if f.get(Split::Test).is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    Ok(LayerResult {
        layer,
        valid: metrics_on(&model, f.get(Split::Valid)),
        test: metrics_on(&model, f.get(Split::Test)),
    })
}

/// One probe per layer, run serially.
pub fn sweep_layers(
    dataset: &ProbeDataset,
    store: &TensorStore,
    config: &TrainConfig,
) -> Result<ProbeReport> {
    let layers = dataset_layers(dataset, store)?;
    let results = layers
        .into_iter()
        .map(|l| probe_layer(dataset, store, l, config))
        .collect::<Result<Vec<_>>>()?;
    ProbeReport::from_layers(&dataset.task, results)
}
