//! Word-level alignment of a reference transcript against an ASR hypothesis,
//! WER, and per-token error typing.
//!
//! Costs are unit (match 0, substitution/insertion/deletion 1). The
//! backtrace prefers a diagonal step (match or substitution), then a
//! deletion, then an insertion, so the script for a given pair is fixed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Match,
    Substitute,
    Insert,
    Delete,
}

/// One step of an edit script. Match/Substitute carry both indices, Insert
/// only a hypothesis index and Delete only a reference index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub ref_index: Option<usize>,
    pub hyp_index: Option<usize>,
}

impl AlignmentOp {
    pub fn matched(r: usize, h: usize) -> Self {
        Self {
            kind: OpKind::Match,
            ref_index: Some(r),
            hyp_index: Some(h),
        }
    }

    pub fn substitute(r: usize, h: usize) -> Self {
        Self {
            kind: OpKind::Substitute,
            ref_index: Some(r),
            hyp_index: Some(h),
        }
    }

    pub fn insert(h: usize) -> Self {
        Self {
            kind: OpKind::Insert,
            ref_index: None,
            hyp_index: Some(h),
        }
    }

    pub fn delete(r: usize) -> Self {
        Self {
            kind: OpKind::Delete,
            ref_index: Some(r),
            hyp_index: None,
        }
    }

    pub fn is_edit(&self) -> bool {
        self.kind != OpKind::Match
    }
}

/// Minimal-cost edit script turning `reference` into `hypothesis`.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<AlignmentOp> {
    let n = reference.len();
    let m = hypothesis.len();
    let w = m + 1;
    let mut d = vec![0u32; (n + 1) * w];
    for (j, v) in d.iter_mut().take(w).enumerate() {
        *v = j as u32;
    }
    for i in 1..=n {
        d[i * w] = i as u32;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == d[(i - 1) * w + j - 1] + u32::from(!same) {
                ops.push(if same {
                    AlignmentOp::matched(i - 1, j - 1)
                } else {
                    AlignmentOp::substitute(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(AlignmentOp::delete(i - 1));
            i -= 1;
        } else {
            ops.push(AlignmentOp::insert(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Number of non-match operations in a script.
pub fn edit_distance(ops: &[AlignmentOp]) -> usize {
    ops.iter().filter(|o| o.is_edit()).count()
}

/// Replays a script over `reference`, taking inserted and substituted words
/// from `hypothesis`. Fails if the script is not a well-formed walk over
/// both sequences.
pub fn apply_script<T: Clone + PartialEq>(
    reference: &[T],
    hypothesis: &[T],
    ops: &[AlignmentOp],
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(hypothesis.len());
    let (mut r, mut h) = (0usize, 0usize);
    for (k, op) in ops.iter().enumerate() {
        let bad = |why: &str| Error::InvalidScript(format!("op {k} ({:?}): {why}", op.kind));
        match op.kind {
            OpKind::Match | OpKind::Substitute => {
                if op.ref_index != Some(r) || op.hyp_index != Some(h) {
                    return Err(bad("indices out of sequence"));
                }
                let (rt, ht) = reference
                    .get(r)
                    .zip(hypothesis.get(h))
                    .ok_or_else(|| bad("index past end"))?;
                if (op.kind == OpKind::Match) != (rt == ht) {
                    return Err(bad("match/substitute disagrees with tokens"));
                }
                out.push(if op.kind == OpKind::Match { rt.clone() } else { ht.clone() });
                r += 1;
                h += 1;
            }
            OpKind::Insert => {
                if op.ref_index.is_some() || op.hyp_index != Some(h) {
                    return Err(bad("insert must carry the next hypothesis index only"));
                }
                out.push(hypothesis.get(h).ok_or_else(|| bad("index past end"))?.clone());
                h += 1;
            }
            OpKind::Delete => {
                if op.hyp_index.is_some() || op.ref_index != Some(r) || r >= reference.len() {
                    return Err(bad("delete must carry the next reference index only"));
                }
                r += 1;
            }
        }
    }
    if r != reference.len() || h != hypothesis.len() {
        return Err(Error::InvalidScript(format!(
            "script consumes {r}/{} reference and {h}/{} hypothesis tokens",
            reference.len(),
            hypothesis.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerStats {
    pub n_ref: usize,
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Percentage, `100 * (S + D + I) / n_ref`. May exceed 100.
    pub wer: f64,
}

impl WerStats {
    pub fn n_hyp(&self) -> usize {
        self.matches + self.substitutions + self.insertions
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Corpus-level WER pooled over many utterances.
    pub fn pooled<'a>(stats: impl IntoIterator<Item = &'a WerStats>) -> Result<WerStats> {
        let mut acc = WerStats {
            n_ref: 0,
            matches: 0,
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            wer: 0.0,
        };
        for s in stats {
            acc.n_ref += s.n_ref;
            acc.matches += s.matches;
            acc.substitutions += s.substitutions;
            acc.deletions += s.deletions;
            acc.insertions += s.insertions;
        }
        if acc.n_ref == 0 {
            return Err(Error::UndefinedWer);
        }
        acc.wer = 100.0 * acc.errors() as f64 / acc.n_ref as f64;
        Ok(acc)
    }
}

pub fn wer(ops: &[AlignmentOp], n_ref: usize) -> Result<WerStats> {
    if n_ref == 0 {
        return Err(Error::UndefinedWer);
    }
    let mut s = WerStats {
        n_ref,
        matches: 0,
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        wer: 0.0,
    };
    for op in ops {
        match op.kind {
            OpKind::Match => s.matches += 1,
            OpKind::Substitute => s.substitutions += 1,
            OpKind::Delete => s.deletions += 1,
            OpKind::Insert => s.insertions += 1,
        }
    }
    if s.matches + s.substitutions + s.deletions != n_ref {
        return Err(Error::InvalidScript(format!(
            "script covers {} reference tokens, expected {n_ref}",
            s.matches + s.substitutions + s.deletions
        )));
    }
    s.wer = 100.0 * s.errors() as f64 / n_ref as f64;
    Ok(s)
}

/// Aligns and scores one pair in a single call.
pub fn score_pair<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerStats> {
    wer(&align(reference, hypothesis), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorLabel {
    Correct,
    Insertion,
    Deletion,
    Substitution,
    /// The hypothesis is empty while the reference is not; emitted once.
    AllDeleted,
}

impl ErrorLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorLabel::Correct => "correct",
            ErrorLabel::Insertion => "insertion",
            ErrorLabel::Deletion => "deletion",
            ErrorLabel::Substitution => "substitution",
            ErrorLabel::AllDeleted => "all-deleted",
        }
    }

    pub fn is_error(self) -> bool {
        self != ErrorLabel::Correct
    }
}

impl fmt::Display for ErrorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenErrorLabel {
    pub hyp_index: usize,
    pub label: ErrorLabel,
}

/// Assigns one label to every hypothesis token.
///
/// A deleted reference region is charged to the hypothesis token right after
/// it, or to the last hypothesis token when the deletion is at the end. A
/// token that already carries its own substitution or insertion keeps it.
/// An empty hypothesis against a non-empty reference yields a single
/// [`ErrorLabel::AllDeleted`] record with `hyp_index` 0.
pub fn label_error_tokens(ops: &[AlignmentOp], hyp_len: usize) -> Result<Vec<TokenErrorLabel>> {
    if hyp_len == 0 {
        let any_deleted = ops.iter().any(|o| o.kind == OpKind::Delete);
        return Ok(if any_deleted {
            vec![TokenErrorLabel {
                hyp_index: 0,
                label: ErrorLabel::AllDeleted,
            }]
        } else {
            Vec::new()
        });
    }
    let mut labels: Vec<Option<ErrorLabel>> = vec![None; hyp_len];
    let mut pending_deletion = false;
    for op in ops {
        let own = match op.kind {
            OpKind::Delete => {
                pending_deletion = true;
                continue;
            }
            OpKind::Match => ErrorLabel::Correct,
            OpKind::Substitute => ErrorLabel::Substitution,
            OpKind::Insert => ErrorLabel::Insertion,
        };
        let h = op
            .hyp_index
            .filter(|&h| h < hyp_len)
            .ok_or_else(|| Error::InvalidScript(format!("hypothesis index {:?} out of range", op.hyp_index)))?;
        if labels[h].is_some() {
            return Err(Error::InvalidScript(format!("hypothesis token {h} labeled twice")));
        }
        labels[h] = Some(if pending_deletion && own == ErrorLabel::Correct {
            ErrorLabel::Deletion
        } else {
            own
        });
        pending_deletion = false;
    }
    if pending_deletion {
        let last = &mut labels[hyp_len - 1];
        if *last == Some(ErrorLabel::Correct) {
            *last = Some(ErrorLabel::Deletion);
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.map(|label| TokenErrorLabel { hyp_index: i, label })
                .ok_or_else(|| Error::InvalidScript(format!("hypothesis token {i} not covered")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use crate::model::normalize_tokens;

    fn toks(s: &str) -> Vec<String> {
        normalize_tokens(s)
    }

    #[test]
    fn table_one_substitution() {
        let r = toks("customer resolution is our primary motive");
        let h = toks("customer resolution is hour primary motive");
        let ops = align(&r, &h);
        assert_eq!(ops.len(), 6);
        assert_eq!(ops[3], AlignmentOp::substitute(3, 3));
        assert_eq!(ops.iter().filter(|o| o.kind == OpKind::Match).count(), 5);
        let s = wer(&ops, r.len()).unwrap();
        assert!((s.wer - 16.67).abs() < 0.01);
        let labels: Vec<_> = label_error_tokens(&ops, h.len())
            .unwrap()
            .into_iter()
            .map(|l| l.label.as_str())
            .collect();
        assert_eq!(
            labels,
            ["correct", "correct", "correct", "substitution", "correct", "correct"]
        );
    }

    #[test]
    fn single_deletion_is_charged_to_next_token() {
        let r = toks("please hold the line");
        let h = toks("please the line");
        let ops = align(&r, &h);
        assert_eq!(
            ops,
            vec![
                AlignmentOp::matched(0, 0),
                AlignmentOp::delete(1),
                AlignmentOp::matched(2, 1),
                AlignmentOp::matched(3, 2)
            ]
        );
        let labels: Vec<_> = label_error_tokens(&ops, 3).unwrap().iter().map(|l| l.label).collect();
        assert_eq!(
            labels,
            [ErrorLabel::Correct, ErrorLabel::Deletion, ErrorLabel::Correct]
        );
    }

    #[test]
    fn trailing_insertions_can_exceed_reference_length() {
        let s = score_pair(&toks("thank you"), &toks("thank you very much")).unwrap();
        assert_eq!(s.insertions, 2);
        assert!((s.wer - 100.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sequences_are_all_matches() {
        let r = toks("a b c d");
        let ops = align(&r, &r);
        assert!(ops.iter().all(|o| o.kind == OpKind::Match));
        assert_eq!(wer(&ops, 4).unwrap().wer, 0.0);
        assert!(label_error_tokens(&ops, 4)
            .unwrap()
            .iter()
            .all(|l| l.label == ErrorLabel::Correct));
    }

    #[test]
    fn zero_reference_is_undefined() {
        assert_eq!(wer(&[], 0), Err(Error::UndefinedWer));
    }

    #[test]
    fn deletion_at_end_goes_to_last_token() {
        let r = toks("yes that is right");
        let h = toks("yes that is");
        let ops = align(&r, &h);
        let labels = label_error_tokens(&ops, 3).unwrap();
        assert_eq!(labels[2].label, ErrorLabel::Deletion);
    }

    #[test]
    fn deletion_yields_to_own_error() {
        // ref a b c, hyp a X : b deleted then c substituted by X (or similar)
        let ops = [
            AlignmentOp::matched(0, 0),
            AlignmentOp::delete(1),
            AlignmentOp::substitute(2, 1),
        ];
        let labels = label_error_tokens(&ops, 2).unwrap();
        assert_eq!(labels[1].label, ErrorLabel::Substitution);
    }

    #[test]
    fn empty_hypothesis_is_all_deleted() {
        let r = toks("hello there");
        let ops = align(&r, &Vec::<String>::new());
        let labels = label_error_tokens(&ops, 0).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].label, ErrorLabel::AllDeleted);
    }

    #[test]
    fn apply_rejects_broken_scripts() {
        let r = toks("a b");
        let h = toks("a c");
        assert!(apply_script(&r, &h, &[AlignmentOp::matched(0, 0)]).is_err());
        assert!(apply_script(&r, &h, &[AlignmentOp::matched(0, 0), AlignmentOp::matched(1, 1)]).is_err());
        let ops = align(&r, &h);
        assert_eq!(apply_script(&r, &h, &ops).unwrap(), h);
    }
}
