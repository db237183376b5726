#![no_std]

//! Core algorithms for probing language models on spoken-language
//! transcripts.
//!
//! Everything here is allocation-only: no file system, no clock, no threads.
//! File formats and the command-line driver live in the `sluprobe` crate.
//!
//! * [`model`]: conversations, turns, timed tokens and probe instances.
//! * [`align`]: reference/hypothesis alignment, WER and ASR error typing.
//! * [`synth`]: seeded generators for corpora, ASR corruption and planted tensors.
//! * [`taskgen`]: probe dataset synthesis, balancing and splitting.
//! * [`store`]: in-memory tensor store keyed by utterance, kind, layer and head.
//! * [`probes`]: linear probes, n-gram baseline, metrics and layer sweeps.
//! * [`attn`]: attention-matrix analyses (dependency UAS, entity-value, ISA).
//! * [`mtl`]: multi-task trunk over frozen features and transfer evaluation.

extern crate alloc;

pub mod align;
pub mod attn;
mod error;
pub mod linalg;
pub mod model;
pub mod mtl;
pub mod probes;
pub mod rng;
pub mod store;
pub mod synth;
pub mod taskgen;

pub use error::{Error, Result};
