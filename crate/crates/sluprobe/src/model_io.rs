//! JSON encoding of trained probes and MTL models. Parameter arrays are
//! stored as base64 of little-endian f32.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sluprobe_core::mtl::{Activation, MtlModel, Trunk};
use sluprobe_core::probes::{NgramVocab, ProbeKind, ProbeModel};
use sluprobe_core::taskgen::LabelSet;

use crate::error::{Error, Result};

pub fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 parameters: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "expected {expected} parameters, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn labels_value(l: &LabelSet) -> Value {
    match l {
        LabelSet::Classes(c) => Value::from(c.clone()),
        LabelSet::Regression => Value::from("regression"),
    }
}

fn labels_from(v: &Value) -> Result<LabelSet> {
    match v {
        Value::String(s) if s == "regression" => Ok(LabelSet::Regression),
        Value::Array(a) => a
            .iter()
            .map(|x| x.as_str().map(String::from))
            .collect::<Option<Vec<_>>>()
            .map(LabelSet::Classes)
            .ok_or_else(|| Error::Format("labels must be strings".into())),
        other => Err(Error::Format(format!("bad labels {other}"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadJson {
    pub kind: String,
    pub input_dim: usize,
    pub labels: Value,
    pub weights: String,
    pub bias: String,
}

impl HeadJson {
    pub fn from_model(m: &ProbeModel) -> Self {
        Self {
            kind: m.kind.as_str().to_string(),
            input_dim: m.input_dim,
            labels: labels_value(&m.label_set),
            weights: encode_f32(&m.weights),
            bias: encode_f32(&m.bias),
        }
    }

    pub fn to_model(&self) -> Result<ProbeModel> {
        let label_set = labels_from(&self.labels)?;
        let kind = ProbeKind::parse(&self.kind).ok_or_else(|| Error::Format(format!("unknown probe kind {}", self.kind)))?;
        let k = label_set.len();
        let m = ProbeModel {
            kind,
            input_dim: self.input_dim,
            weights: decode_f32(&self.weights, k * self.input_dim)?,
            bias: decode_f32(&self.bias, k)?,
            label_set,
        };
        m.check()?;
        Ok(m)
    }
}

/// A trained probe with the feature source it was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeFile {
    pub task: String,
    /// Store layer, absent for n-gram probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    /// N-gram vocabulary in index order, for n-gram probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ngrams: Option<NgramJson>,
    pub head: HeadJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NgramJson {
    pub n_max: usize,
    pub vocab: Vec<String>,
}

impl NgramJson {
    pub fn from_vocab(v: &NgramVocab) -> Self {
        let mut vocab: Vec<(&String, &usize)> = v.index.iter().collect();
        vocab.sort_by_key(|(_, &i)| i);
        Self {
            n_max: v.n_max,
            vocab: vocab.into_iter().map(|(k, _)| k.clone()).collect(),
        }
    }

    pub fn to_vocab(&self) -> NgramVocab {
        NgramVocab {
            n_max: self.n_max,
            index: self.vocab.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrunkJson {
    pub input_dim: usize,
    pub width: usize,
    pub activation: String,
    pub weights: String,
    pub bias: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MtlFile {
    pub kind: String,
    pub layer: u32,
    pub trunk: TrunkJson,
    pub heads: BTreeMap<String, HeadJson>,
}

impl MtlFile {
    pub fn from_model(m: &MtlModel, layer: u32) -> Self {
        Self {
            kind: "mtl".into(),
            layer,
            trunk: TrunkJson {
                input_dim: m.trunk.input_dim,
                width: m.trunk.width,
                activation: m.trunk.activation.as_str().into(),
                weights: encode_f32(&m.trunk.weights),
                bias: encode_f32(&m.trunk.bias),
            },
            heads: m.heads.iter().map(|(k, h)| (k.clone(), HeadJson::from_model(h))).collect(),
        }
    }

    pub fn to_model(&self) -> Result<MtlModel> {
        let t = &self.trunk;
        let activation = Activation::parse(&t.activation)
            .ok_or_else(|| Error::Format(format!("unknown activation {}", t.activation)))?;
        let model = MtlModel {
            trunk: Trunk {
                input_dim: t.input_dim,
                width: t.width,
                activation,
                weights: decode_f32(&t.weights, t.width * t.input_dim)?,
                bias: decode_f32(&t.bias, t.width)?,
            },
            heads: self
                .heads
                .iter()
                .map(|(k, h)| Ok((k.clone(), h.to_model()?)))
                .collect::<Result<_>>()?,
        };
        model.check()?;
        Ok(model)
    }
}
