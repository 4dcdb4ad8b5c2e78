//! Binary checkpoints: `IMCK`, a little-endian u64 header length, a JSON
//! header, then the raw little-endian tensor blob described by the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::{Precision, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config_hash: String,
    /// Architecture and whatever else is needed to rebuild the model.
    pub config: Value,
    pub dtype: Precision,
    pub tensors: Vec<TensorEntry>,
    pub extra: Value,
}

pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn width(p: Precision) -> usize {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

/// Writes every tensor of `store` in its native precision.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    kind: &str,
    config_hash: &str,
    config: Value,
    extra: Value,
    store: &ParamStore<T>,
) -> Result<()> {
    let w = width(T::PRECISION);
    let mut entries = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    for (name, t) in store.names().iter().zip(store.tensors()) {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        blob.reserve(t.numel() * w);
        for &v in t.data() {
            match T::PRECISION {
                Precision::F32 => blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Precision::F64 => blob.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        config,
        dtype: T::PRECISION,
        tensors: entries,
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + blob.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint of the expected `kind`, converting to `T` if needed.
pub fn load_checkpoint<T: Real>(path: &Path, kind: &str) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.kind != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let blob = &bytes[12 + len..];
    let w = width(header.dtype);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset..e.offset + n * w)
            .ok_or_else(|| bad(format!("tensor {} runs past the blob", e.name)))?;
        let data = raw
            .chunks_exact(w)
            .map(|c| match header.dtype {
                Precision::F32 => T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                Precision::F64 => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(Checkpoint { header, tensors })
}
