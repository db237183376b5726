//! In-memory tensor store: per-layer utterance vectors, token matrices and
//! per-head attention matrices keyed by utterance id.
//!
//! Layer 0 is the embedding output, layers `1..=L` the transformer blocks.
//! The on-disk encoding lives in the `sluprobe` crate.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    UtteranceVec,
    TokenMat,
    Attention,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::UtteranceVec => "utterance_vec",
            RecordKind::TokenMat => "token_mat",
            RecordKind::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "utterance_vec" => RecordKind::UtteranceVec,
            "token_mat" => RecordKind::TokenMat,
            "attention" => RecordKind::Attention,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub id: String,
    pub kind: RecordKind,
    pub layer: u32,
    pub head: Option<u32>,
}

impl RecordKey {
    pub fn utterance(id: impl Into<String>, layer: u32) -> Self {
        Self {
            id: id.into(),
            kind: RecordKind::UtteranceVec,
            layer,
            head: None,
        }
    }

    pub fn tokens(id: impl Into<String>, layer: u32) -> Self {
        Self {
            id: id.into(),
            kind: RecordKind::TokenMat,
            layer,
            head: None,
        }
    }

    pub fn attention(id: impl Into<String>, layer: u32, head: u32) -> Self {
        Self {
            id: id.into(),
            kind: RecordKind::Attention,
            layer,
            head: Some(head),
        }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, layer {}", self.id, self.kind.as_str(), self.layer)?;
        match self.head {
            Some(h) => write!(f, ", head {h})"),
            None => f.write_str(")"),
        }
    }
}

/// Row-major `rows x cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: alloc::vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    records: BTreeMap<RecordKey, Matrix>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a record, rejecting duplicate keys and shapes inconsistent
    /// with the record kind.
    pub fn insert(&mut self, key: RecordKey, matrix: Matrix) -> Result<()> {
        match key.kind {
            RecordKind::UtteranceVec if matrix.rows != 1 => {
                return Err(Error::ShapeMismatch(format!(
                    "{key}: utterance vectors have one row, got {}",
                    matrix.rows
                )))
            }
            RecordKind::Attention if matrix.rows != matrix.cols => {
                return Err(Error::ShapeMismatch(format!(
                    "{key}: attention must be square, got {}x{}",
                    matrix.rows, matrix.cols
                )))
            }
            _ => {}
        }
        if (key.kind == RecordKind::Attention) != key.head.is_some() {
            return Err(Error::ShapeMismatch(format!(
                "{key}: head index required for attention records only"
            )));
        }
        if self.records.contains_key(&key) {
            return Err(Error::DuplicateKey(format!("{key}")));
        }
        self.records.insert(key, matrix);
        Ok(())
    }

    pub fn get(&self, key: &RecordKey) -> Option<&Matrix> {
        self.records.get(key)
    }

    pub fn utterance_vec(&self, id: &str, layer: u32) -> Option<&Matrix> {
        self.get(&RecordKey::utterance(id, layer))
    }

    pub fn token_mat(&self, id: &str, layer: u32) -> Option<&Matrix> {
        self.get(&RecordKey::tokens(id, layer))
    }

    pub fn attention(&self, id: &str, layer: u32, head: u32) -> Option<&Matrix> {
        self.get(&RecordKey::attention(id, layer, head))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RecordKey, &Matrix)> {
        self.records.iter()
    }

    /// Sorted distinct layers present for `kind`.
    pub fn layers(&self, kind: RecordKind) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .records
            .keys()
            .filter(|k| k.kind == kind)
            .map(|k| k.layer)
            .collect();
        set.into_iter().collect()
    }

    /// Sorted distinct heads present for attention records.
    pub fn heads(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.keys().filter_map(|k| k.head).collect();
        set.into_iter().collect()
    }

    /// Same keys and bit-identical matrices.
    pub fn bit_eq(&self, other: &TensorStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Column count shared by every record of `kind`, if consistent.
    pub fn dim(&self, kind: RecordKind) -> Option<usize> {
        let mut it = self.records.iter().filter(|(k, _)| k.kind == kind);
        let first = it.next()?.1.cols;
        it.all(|(_, m)| m.cols == first).then_some(first)
    }
}

impl FromIterator<(RecordKey, Matrix)> for TensorStore {
    fn from_iter<I: IntoIterator<Item = (RecordKey, Matrix)>>(iter: I) -> Self {
        Self {
            records: iter.into_iter().collect(),
        }
    }
}
