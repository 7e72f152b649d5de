//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DC2CKPT1`, a little-endian `u64` header length,
//! the JSON header (model config, training metadata, parameter names and
//! shapes), then every parameter as little-endian `f32` in header order.

use std::path::Path;

use dc2_core::dfnet::{Dfnet, ModelConfig};
use dc2_core::nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{read_bytes, write_bytes};

pub const MAGIC: &[u8; 8] = b"DC2CKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    /// Free-form training metadata (config, steps done).
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// A model plus the metadata it was saved with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Dfnet<f32>,
    pub meta: serde_json::Value,
    /// Short content hash of the encoded file.
    pub id: String,
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

pub fn encode(model: &Dfnet<f32>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        model: model.config().clone(),
        meta: meta.clone(),
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing DC2CKPT1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
    let mut store = ParamStore::new();
    let mut pos = body_start;
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let end = pos + 4 * n;
        if end > bytes.len() {
            return Err(bad("truncated parameter data"));
        }
        let data = bytes[pos..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.push(p.name.clone(), Tensor::from_vec(p.shape, data));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    let model = Dfnet::from_params(&header.model, store)?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
        id: content_id(bytes),
    })
}

/// Writes the checkpoint and returns its id.
pub fn save(path: &Path, model: &Dfnet<f32>, meta: &serde_json::Value) -> Result<String> {
    let bytes = encode(model, meta)?;
    let tmp = path.with_extension("tmp");
    write_bytes(&tmp, &bytes)?;
    std::fs::rename(&tmp, path).map_err(crate::error::io_err(path))?;
    Ok(content_id(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_bytes(path)?)
}
