//! Attention-matrix analyses: dependency-head UAS, entity-value selection
//! accuracy and inter-sentence attention buckets.
//!
//! Attention rows are sources, columns targets. Argmax targets exclude the
//! source token itself and break ties toward the lowest index.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::model::DependencySentence;
use crate::store::{Matrix, RecordKind, TensorStore};
use crate::{Error, Result};

/// Rows may deviate from summing to one by at most this much.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

pub fn check_row_stochastic(id: &str, layer: u32, head: u32, m: &Matrix) -> Result<()> {
    for r in 0..m.rows {
        let sum: f64 = m.row(r).iter().map(|&v| v as f64).sum();
        let negative = m.row(r).iter().any(|&v| v < 0.0 || !v.is_finite());
        if negative || libm::fabs(sum - 1.0) > ROW_SUM_TOLERANCE {
            return Err(Error::NotRowStochastic {
                id: id.to_string(),
                layer,
                head,
                row: r,
                sum,
            });
        }
    }
    Ok(())
}

/// Argmax over row `i` excluding column `i`; lowest index wins ties.
pub fn argmax_excluding_self(m: &Matrix, i: usize) -> Option<usize> {
    let row = m.row(i);
    let mut best: Option<usize> = None;
    for (j, &v) in row.iter().enumerate() {
        if j == i {
            continue;
        }
        if best.is_none_or(|b| v > row[b]) {
            best = Some(j);
        }
    }
    best
}

fn attention<'a>(store: &'a TensorStore, id: &str, layer: u32, head: u32, len: usize) -> Result<&'a Matrix> {
    let m = store
        .attention(id, layer, head)
        .ok_or_else(|| Error::MissingFeature(format!("({id}, attention, layer {layer}, head {head})")))?;
    if m.rows != len {
        return Err(Error::LengthMismatch(format!(
            "{id}: {len} tokens but attention at layer {layer} head {head} is {}x{}",
            m.rows, m.cols
        )));
    }
    check_row_stochastic(id, layer, head, m)?;
    Ok(m)
}

fn grid(store: &TensorStore) -> Result<(Vec<u32>, Vec<u32>)> {
    let layers = store.layers(RecordKind::Attention);
    let heads = store.heads();
    if layers.is_empty() || heads.is_empty() {
        return Err(Error::MissingFeature("no attention records in store".into()));
    }
    Ok((layers, heads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    /// The dependent's row points at its head.
    DepToHead,
    /// The head's row points at its dependent.
    HeadToDep,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::DepToHead, Direction::HeadToDep];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::DepToHead => "dep->head",
            Direction::HeadToDep => "head->dep",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationScore {
    pub relation: String,
    pub layer: u32,
    pub head: u32,
    pub direction: Direction,
    pub correct: usize,
    pub total: usize,
    pub uas: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyReport {
    /// Best (layer, head, direction) per relation, sorted by relation name.
    pub relations: Vec<RelationScore>,
    /// Best single cell over all relation instances pooled.
    pub all_micro: RelationScore,
    /// Mean of the per-relation best scores.
    pub all_macro: f64,
    /// Named per-relation score differences, e.g. between a model and its
    /// ASR-robust variant. Keys of the inner map are relations plus `all`.
    pub deltas: BTreeMap<String, BTreeMap<String, f64>>,
}

impl DependencyReport {
    pub fn relation(&self, name: &str) -> Option<&RelationScore> {
        self.relations.iter().find(|r| r.relation == name)
    }

    /// Records `self - baseline` for every relation present in both, plus `all`.
    pub fn add_delta(&mut self, name: &str, baseline: &DependencyReport) {
        let mut d = BTreeMap::new();
        for r in &self.relations {
            if let Some(b) = baseline.relation(&r.relation) {
                d.insert(r.relation.clone(), r.uas - b.uas);
            }
        }
        d.insert("all".to_string(), self.all_micro.uas - baseline.all_micro.uas);
        self.deltas.insert(name.to_string(), d);
    }
}

type Cell = ((u32, u32, Direction), BTreeMap<String, (usize, usize)>);

/// Scores every (layer, head, direction) cell; `cells[c][relation] = (correct, total)`.
fn dependency_cells(
    store: &TensorStore,
    sentences: &[(String, DependencySentence)],
    layers: &[u32],
    heads: &[u32],
) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for &layer in layers {
        for &head in heads {
            let mut per = [BTreeMap::new(), BTreeMap::new()];
            for (id, s) in sentences {
                s.check()?;
                let m = attention(store, id, layer, head, s.len())?;
                for (i, (&h, rel)) in s.heads.iter().zip(&s.relations).enumerate() {
                    if h == 0 {
                        continue;
                    }
                    let g = h - 1;
                    let dep_ok = argmax_excluding_self(m, i) == Some(g);
                    let head_ok = argmax_excluding_self(m, g) == Some(i);
                    for (slot, ok) in [(0, dep_ok), (1, head_ok)] {
                        let e: &mut (usize, usize) = per[slot].entry(rel.clone()).or_default();
                        e.0 += usize::from(ok);
                        e.1 += 1;
                    }
                }
            }
            let [dep, hd] = per;
            cells.push(((layer, head, Direction::DepToHead), dep));
            cells.push(((layer, head, Direction::HeadToDep), hd));
        }
    }
    Ok(cells)
}

fn pct(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// Per-relation UAS of the best attention head in either direction.
pub fn dependency_uas(
    store: &TensorStore,
    sentences: &[(String, DependencySentence)],
) -> Result<DependencyReport> {
    let (layers, heads) = grid(store)?;
    let cells = dependency_cells(store, sentences, &layers, &heads)?;

    let mut best: BTreeMap<String, RelationScore> = BTreeMap::new();
    let mut all: Option<RelationScore> = None;
    for ((layer, head, direction), per) in &cells {
        let score = |relation: &str, (correct, total): (usize, usize)| RelationScore {
            relation: relation.to_string(),
            layer: *layer,
            head: *head,
            direction: *direction,
            correct,
            total,
            uas: pct(correct, total),
        };
        for (rel, &counts) in per {
            let s = score(rel, counts);
            match best.get(rel) {
                Some(b) if b.uas >= s.uas => {}
                _ => {
                    best.insert(rel.clone(), s);
                }
            }
        }
        let pooled = per
            .values()
            .fold((0, 0), |(c, t), &(c2, t2)| (c + c2, t + t2));
        let s = score("all", pooled);
        if all.as_ref().is_none_or(|a| s.uas > a.uas) {
            all = Some(s);
        }
    }
    let relations: Vec<RelationScore> = best.into_values().collect();
    let all_macro = if relations.is_empty() {
        0.0
    } else {
        relations.iter().map(|r| r.uas).sum::<f64>() / relations.len() as f64
    };
    Ok(DependencyReport {
        relations,
        all_micro: all.expect("non-empty grid"),
        all_macro,
        deltas: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanPair {
    pub id: String,
    pub entity: Range<usize>,
    pub value: Range<usize>,
}

impl SpanPair {
    pub fn check(&self, len: usize) -> Result<()> {
        let bad = |why: &str| Err(Error::SpanOutOfRange(format!("{}: {why}", self.id)));
        if self.entity.is_empty() || self.value.is_empty() {
            return bad("empty span");
        }
        if self.entity.end > len || self.value.end > len {
            return bad("span beyond sequence length");
        }
        if self.entity.start < self.value.end && self.value.start < self.entity.end {
            return bad("entity and value spans overlap");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelection {
    Single { layer: u32, head: u32 },
    /// Element-wise maximum over all heads of the layer.
    MaxPooled { layer: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityValueReport {
    pub accuracy: f64,
    pub successes: usize,
    pub total: usize,
    pub per_pair: Vec<(String, f64)>,
}

/// Share of value-span tokens whose strongest non-self attention target
/// falls inside the entity span.
pub fn entity_value_accuracy(
    store: &TensorStore,
    pairs: &[SpanPair],
    selection: HeadSelection,
) -> Result<EntityValueReport> {
    let mut successes = 0;
    let mut total = 0;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        let m = match selection {
            HeadSelection::Single { layer, head } => {
                let m = store.attention(&p.id, layer, head).ok_or_else(|| {
                    Error::MissingFeature(format!("({}, attention, layer {layer}, head {head})", p.id))
                })?;
                check_row_stochastic(&p.id, layer, head, m)?;
                m.clone()
            }
            HeadSelection::MaxPooled { layer } => {
                let mut pooled: Option<Matrix> = None;
                for head in store.heads() {
                    if let Some(m) = store.attention(&p.id, layer, head) {
                        check_row_stochastic(&p.id, layer, head, m)?;
                        match &mut pooled {
                            None => pooled = Some(m.clone()),
                            Some(acc) if acc.rows == m.rows => {
                                for (a, &b) in acc.data.iter_mut().zip(&m.data) {
                                    *a = a.max(b);
                                }
                            }
                            Some(acc) => {
                                return Err(Error::ShapeMismatch(format!(
                                    "{}: heads disagree on size ({} vs {})",
                                    p.id, acc.rows, m.rows
                                )))
                            }
                        }
                    }
                }
                pooled.ok_or_else(|| Error::MissingFeature(format!("({}, attention, layer {layer})", p.id)))?
            }
        };
        p.check(m.rows)?;
        let hits = p
            .value
            .clone()
            .filter(|&i| argmax_excluding_self(&m, i).is_some_and(|j| p.entity.contains(&j)))
            .count();
        let n = p.value.len();
        successes += hits;
        total += n;
        per_pair.push((p.id.clone(), pct(hits, n)));
    }
    Ok(EntityValueReport {
        accuracy: pct(successes, total),
        successes,
        total,
        per_pair,
    })
}

/// Roles of the tokens of one multi-utterance input. Segments, separators
/// and the initial token must together cover every position exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub segments: Vec<Range<usize>>,
    pub separators: Vec<usize>,
    pub initial: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Segment(usize),
    Separator,
    Initial,
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|r| r.len()).sum::<usize>()
            + self.separators.len()
            + usize::from(self.initial.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn roles(&self, id: &str) -> Result<Vec<Role>> {
        let n = self.len();
        let mut roles: Vec<Option<Role>> = vec![None; n];
        let fail = |reason: String| Error::Segmentation {
            id: id.to_string(),
            reason,
        };
        let mut put = |i: usize, r: Role| -> Result<()> {
            match roles.get_mut(i) {
                None => Err(fail(format!("position {i} beyond length {n}"))),
                Some(Some(_)) => Err(fail(format!("position {i} assigned twice"))),
                Some(slot) => {
                    *slot = Some(r);
                    Ok(())
                }
            }
        };
        for (s, range) in self.segments.iter().enumerate() {
            for i in range.clone() {
                put(i, Role::Segment(s))?;
            }
        }
        for &i in &self.separators {
            put(i, Role::Separator)?;
        }
        if let Some(i) = self.initial {
            put(i, Role::Initial)?;
        }
        roles
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| fail(format!("position {i} not covered"))))
            .collect()
    }
}

/// Attention mass fractions by target role.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Buckets {
    pub self_attn: f64,
    pub intra: f64,
    pub inter: f64,
    pub separator: f64,
    pub initial: f64,
}

impl Buckets {
    pub fn sum(&self) -> f64 {
        self.self_attn + self.intra + self.inter + self.separator + self.initial
    }

    pub fn isa_percent(&self) -> f64 {
        100.0 * self.inter
    }

    fn add(&mut self, o: &Buckets) {
        self.self_attn += o.self_attn;
        self.intra += o.intra;
        self.inter += o.inter;
        self.separator += o.separator;
        self.initial += o.initial;
    }

    fn scale(&mut self, s: f64) {
        self.self_attn *= s;
        self.intra *= s;
        self.inter *= s;
        self.separator *= s;
        self.initial *= s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBuckets {
    pub layer: u32,
    pub buckets: Buckets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadBuckets {
    pub layer: u32,
    pub head: u32,
    pub buckets: Buckets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnBuckets {
    /// Averaged over heads and segment source tokens.
    pub layers: Vec<LayerBuckets>,
    pub per_head: Vec<HeadBuckets>,
}

impl AttnBuckets {
    pub fn layer(&self, layer: u32) -> Option<&Buckets> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| &l.buckets)
    }
}

fn row_buckets(row: &[f32], src: usize, roles: &[Role]) -> Buckets {
    let sum: f64 = row.iter().map(|&v| v as f64).sum();
    let mut b = Buckets::default();
    let src_seg = roles[src];
    for (j, &v) in row.iter().enumerate() {
        let w = v as f64 / sum;
        if j == src {
            b.self_attn += w;
            continue;
        }
        match roles[j] {
            Role::Separator => b.separator += w,
            Role::Initial => b.initial += w,
            r if r == src_seg => b.intra += w,
            Role::Segment(_) => b.inter += w,
        }
    }
    b
}

/// Average attention mass per bucket for each layer (and each head).
/// Source rows are the segment tokens; rows are renormalised to sum to one.
pub fn attention_buckets(
    store: &TensorStore,
    inputs: &[(String, Segmentation)],
) -> Result<AttnBuckets> {
    let (layers, heads) = grid(store)?;
    let roles: Vec<Vec<Role>> = inputs
        .iter()
        .map(|(id, s)| s.roles(id))
        .collect::<Result<_>>()?;
    let mut out_layers = Vec::with_capacity(layers.len());
    let mut per_head = Vec::with_capacity(layers.len() * heads.len());
    for &layer in &layers {
        let mut layer_acc = Buckets::default();
        let mut layer_rows = 0usize;
        for &head in &heads {
            let mut acc = Buckets::default();
            let mut rows = 0usize;
            for ((id, _), roles) in inputs.iter().zip(&roles) {
                let m = attention(store, id, layer, head, roles.len())?;
                for (i, r) in roles.iter().enumerate() {
                    if matches!(r, Role::Segment(_)) {
                        acc.add(&row_buckets(m.row(i), i, roles));
                        rows += 1;
                    }
                }
            }
            layer_acc.add(&acc);
            layer_rows += rows;
            if rows > 0 {
                acc.scale(1.0 / rows as f64);
            }
            per_head.push(HeadBuckets {
                layer,
                head,
                buckets: acc,
            });
        }
        if layer_rows > 0 {
            layer_acc.scale(1.0 / layer_rows as f64);
        }
        out_layers.push(LayerBuckets {
            layer,
            buckets: layer_acc,
        });
    }
    Ok(AttnBuckets {
        layers: out_layers,
        per_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::RecordKey;

    fn store_with(id: &str, m: Matrix) -> TensorStore {
        let mut s = TensorStore::new();
        s.insert(RecordKey::attention(id, 0, 0), m).unwrap();
        s
    }

    fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.row_mut(i)[i] = 1.0;
        }
        m
    }

    #[test]
    fn self_excluded_and_ties_low() {
        let m = Matrix::new(3, 3, vec![0.5, 0.25, 0.25, 0.2, 0.6, 0.2, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(argmax_excluding_self(&m, 0), Some(1));
        assert_eq!(argmax_excluding_self(&m, 1), Some(0));
        assert_eq!(argmax_excluding_self(&m, 2), Some(0));
    }

    #[test]
    fn identity_is_all_self() {
        let seg = Segmentation {
            segments: vec![0..2, 3..5],
            separators: vec![2],
            initial: None,
        };
        let b = attention_buckets(&store_with("x", identity(5)), &[("x".into(), seg)]).unwrap();
        let l = b.layer(0).unwrap();
        assert_eq!(l.self_attn, 1.0);
        assert_eq!(l.sum(), 1.0);
    }

    #[test]
    fn segmentation_must_cover() {
        let seg = Segmentation {
            segments: vec![0..2, 3..4],
            separators: vec![],
            initial: None,
        };
        assert!(matches!(
            attention_buckets(&store_with("x", identity(4)), &[("x".into(), seg)]),
            Err(Error::Segmentation { .. })
        ));
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let m = Matrix::new(2, 2, vec![0.5, 0.4, 0.5, 0.5]).unwrap();
        let s = store_with("x", m);
        let sentence = DependencySentence {
            tokens: vec!["a".into(), "b".into()],
            heads: vec![0, 1],
            relations: vec!["root".into(), "obj".into()],
        };
        assert!(matches!(
            dependency_uas(&s, &[("x".into(), sentence)]),
            Err(Error::NotRowStochastic { row: 0, .. })
        ));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let p = SpanPair {
            id: "x".into(),
            entity: 0..3,
            value: 2..4,
        };
        assert!(p.check(5).is_err());
    }
}
