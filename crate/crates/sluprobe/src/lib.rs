//! File formats, the on-disk tensor store, reports and the command-line
//! driver around `sluprobe-core`.

pub mod cli;
mod error;
pub mod ingest;
pub mod manifest;
pub mod model_io;
pub mod report;
pub mod tensor_io;

pub use error::{Error, Result};
