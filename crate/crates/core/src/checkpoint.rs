//! Model checkpoints.
//!
//! Layout: the 8-byte magic `ARGMCKPT`, a little-endian `u64` header length,
//! a JSON header (model config, free-form metadata and a tensor index), then
//! every parameter as little-endian `f32` in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ARGMCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(cfg: &ModelConfig, store: &ParamStore<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        format_version: 1,
        config: cfg.clone(),
        meta,
        tensors: store
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + store.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, cfg: &ModelConfig, store: &ParamStore<f32>, meta: serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(cfg, store, meta)?)?;
    Ok(())
}

/// A restored model with its parameters and the saved metadata.
pub struct Checkpoint {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub meta: serde_json::Value,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let perr = |offset, msg: String| Error::Parse { offset, msg };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(perr(0, "not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| perr(8, format!("header length {hlen} exceeds file")))?;
    let header: Header = serde_json::from_slice(body)?;
    let (model, mut store) = Model::new::<f32>(&header.config, 0)?;
    if header.tensors.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, the configured model has {}",
            header.tensors.len(),
            store.len()
        )));
    }
    let mut pos = 16 + hlen;
    for entry in &header.tensors {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor `{}` is not a model parameter", entry.name)))?;
        if store.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Config(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                store.value(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| perr(pos, format!("payload truncated in tensor `{}`", entry.name)))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        *store.value_mut(id) = Tensor::new(&entry.shape, data)?;
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(perr(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint {
        model,
        store,
        meta: header.meta,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    from_bytes(&bytes)
}
