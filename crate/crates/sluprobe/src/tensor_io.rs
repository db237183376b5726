//! On-disk tensor store.
//!
//! `<name>.bin` holds the 8-byte magic `SLUPROB1` followed by little-endian
//! f32 payloads; `<name>.manifest.jsonl` lists one record per line with its
//! shape and absolute byte offset into the `.bin` file.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sluprobe_core::store::{Matrix, RecordKey, RecordKind, TensorStore};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SLUPROB1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub kind: String,
    pub layer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<u32>,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

impl ManifestRecord {
    pub fn byte_len(&self) -> u64 {
        (self.rows * self.cols * 4) as u64
    }
}

/// `store.bin` -> `store.manifest.jsonl`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    let stem = bin.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    bin.with_file_name(format!("{stem}.manifest.jsonl"))
}

/// Encodes `store` in key order. Returns the payload bytes and manifest.
pub fn encode(store: &TensorStore) -> (Vec<u8>, Vec<ManifestRecord>) {
    let total: usize = store.iter().map(|(_, m)| m.data.len() * 4).sum();
    let mut bytes = Vec::with_capacity(8 + total);
    bytes.extend_from_slice(MAGIC);
    let mut manifest = Vec::with_capacity(store.len());
    for (key, m) in store.iter() {
        manifest.push(ManifestRecord {
            id: key.id.clone(),
            kind: key.kind.as_str().to_string(),
            layer: key.layer,
            head: key.head,
            rows: m.rows,
            cols: m.cols,
            offset: bytes.len() as u64,
        });
        for v in &m.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, manifest)
}

pub fn write_manifest(mut w: impl Write, manifest: &[ManifestRecord]) -> Result<()> {
    for r in manifest {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<manifest>", e))?;
    }
    w.flush().map_err(|e| Error::io("<manifest>", e))
}

/// Writes `bin` and its manifest next to it.
pub fn write_store(store: &TensorStore, bin: &Path) -> Result<Vec<ManifestRecord>> {
    let (bytes, manifest) = encode(store);
    if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(bin, &bytes).map_err(|e| Error::io(bin, e))?;
    let mpath = manifest_path(bin);
    let mut buf = Vec::new();
    write_manifest(&mut buf, &manifest)?;
    fs::write(&mpath, buf).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn parse_manifest(reader: impl BufRead) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e))?);
    }
    Ok(out)
}

/// Rebuilds a store from payload bytes and manifest, checking the magic,
/// record bounds, overlaps and shapes.
pub fn decode(bytes: &[u8], manifest: &[ManifestRecord]) -> Result<TensorStore> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("bad magic, expected SLUPROB1".into()));
    }
    let mut spans: Vec<(u64, u64, usize)> = Vec::with_capacity(manifest.len());
    let mut store = TensorStore::new();
    for (i, r) in manifest.iter().enumerate() {
        let kind = RecordKind::parse(&r.kind)
            .ok_or_else(|| Error::Integrity(format!("record {}: unknown kind {:?}", i + 1, r.kind)))?;
        let start = r.offset;
        let end = start
            .checked_add(r.byte_len())
            .ok_or_else(|| Error::Integrity(format!("record {}: offset overflow", i + 1)))?;
        if start < MAGIC.len() as u64 {
            return Err(Error::Integrity(format!("record {}: offset {start} inside header", i + 1)));
        }
        if end > bytes.len() as u64 {
            return Err(Error::Integrity(format!(
                "record {} ({}): bytes {start}..{end} beyond file length {} (truncated payload)",
                i + 1,
                r.id,
                bytes.len()
            )));
        }
        spans.push((start, end, i));
        let data: Vec<f32> = bytes[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let key = RecordKey {
            id: r.id.clone(),
            kind,
            layer: r.layer,
            head: r.head,
        };
        store.insert(key, Matrix::new(r.rows, r.cols, data)?)?;
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Integrity(format!(
                "records {} and {} overlap",
                w[0].2 + 1,
                w[1].2 + 1
            )));
        }
    }
    Ok(store)
}

pub fn read_store(bin: &Path) -> Result<TensorStore> {
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let mpath = manifest_path(bin);
    let manifest = parse_manifest(crate::ingest::open(&mpath)?).map_err(|e| match e {
        Error::Parse { line, message } => Error::Integrity(format!("{}: line {line}: {message}", mpath.display())),
        e => e,
    })?;
    decode(&bytes, &manifest)
}

/// Resolves a store path, falling back to `$SLUPROBE_CACHE/<path>` when the
/// path does not exist as given.
pub fn resolve_store_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("SLUPROBE_CACHE") {
        Some(dir) => {
            let cached = Path::new(&dir).join(path);
            if cached.exists() {
                cached
            } else {
                path.to_path_buf()
            }
        }
        None => path.to_path_buf(),
    }
}
