//! Parameter checkpoints: a flat little-endian `f64` blob plus a JSON
//! manifest listing each tensor's name, shape and element offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{KernelError, ParamStore, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save(store: &ParamStore, stem: &Path, metadata: serde_json::Value) -> Result<(), KernelError> {
    let mut blob = Vec::with_capacity(store.numel() * 8);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        tensors: entries,
        metadata,
    };
    fs::write(stem.with_extension("bin"), blob)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| KernelError::Checkpoint(e.to_string()))?;
    fs::write(stem.with_extension("json"), json)?;
    Ok(())
}

pub fn load(stem: &Path) -> Result<(ParamStore, serde_json::Value), KernelError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)
        .map_err(|e| KernelError::Checkpoint(e.to_string()))?;
    let blob = fs::read(stem.with_extension("bin"))?;
    if blob.len() % 8 != 0 {
        return Err(KernelError::Checkpoint("blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n;
        if end > values.len() {
            return Err(KernelError::Checkpoint(format!("tensor {} overruns blob", e.name)));
        }
        store.add(e.name, Tensor::new(e.shape, values[e.offset..end].to_vec())?)?;
    }
    Ok((store, manifest.metadata))
}
