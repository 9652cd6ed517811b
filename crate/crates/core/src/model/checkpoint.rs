//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `VITCKPT1`, a little-endian `u64` header
//! length, a JSON header (config plus tensor index), then every tensor as
//! raw little-endian `f64` values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamKey, ParamStore, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VITCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in values.
    offset: usize,
}

pub fn checkpoint_bytes(model: &TransformerModel) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .params()
        .iter()
        .map(|(k, t)| {
            let e = Entry {
                name: k.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params().values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TransformerModel> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize.checked_add(header_len).ok_or_else(|| bad("header length overflow"))?;
    if bytes.len() < data_start {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(bad("data section not a whole number of f64 values"));
    }
    let mut store = ParamStore::new();
    for e in header.tensors {
        let key: ParamKey = e.name.parse()?;
        let n: usize = e.shape.iter().product();
        let end = (e.offset + n) * 8;
        if end > data.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past end of data", e.name)));
        }
        let values = data[e.offset * 8..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(key, Tensor::new(e.shape, values)?);
    }
    TransformerModel::from_parts(header.config, store)
}

pub fn save_checkpoint(model: &TransformerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
