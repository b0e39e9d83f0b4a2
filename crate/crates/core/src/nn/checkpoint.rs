//! Model checkpoints.
//!
//! Layout: the 4-byte magic `RSCK`, a version byte, a `u32` little-endian
//! header length, a UTF-8 JSON header, then every parameter tensor as
//! row-major `f64` little-endian values. Tensors follow
//! [`TinyModel::param_keys`] order: embedding, then for each block
//! `ln_scale, ln_bias, w_in, b_in, w_out, b_out`, then the final LayerNorm
//! scale and bias and the unembedding. The header lists every tensor's name
//! and shape in that order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, TinyModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RSCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    pub params: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &TinyModel) -> Result<Vec<u8>> {
    let keys = model.param_keys();
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed: model.seed,
        final_train_loss: model.final_train_loss,
        params: keys
            .iter()
            .map(|&k| TensorEntry {
                name: k.name(),
                shape: model.param(k).shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(9 + json.len() + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for k in keys {
        for v in model.param(k).iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TinyModel> {
    let corrupt = |reason: String| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing RSCK magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(corrupt(format!("unsupported version {}", bytes[4])));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(9..9 + len)
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
    let mut model = TinyModel::new(header.config.clone(), header.seed)?;
    model.final_train_loss = header.final_train_loss;
    let keys = model.param_keys();
    if keys.len() != header.params.len() {
        return Err(corrupt(format!(
            "{} tensors listed, config implies {}",
            header.params.len(),
            keys.len()
        )));
    }
    let total: usize = keys.iter().map(|&k| model.param(k).len()).sum();
    let payload = &bytes[9 + len..];
    if payload.len() != total * 8 {
        return Err(Error::CorruptPayload {
            path: path.to_path_buf(),
            expected: total * 8,
            found: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (k, entry) in keys.into_iter().zip(&header.params) {
        let mut p = model.param_mut(k);
        if entry.name != k.name() || entry.shape != p.shape() {
            return Err(corrupt(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                k.name(),
                p.shape()
            )));
        }
        for (dst, src) in p.iter_mut().zip(&mut values) {
            if !src.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint tensor {}", entry.name)));
            }
            *dst = src;
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TinyModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TinyModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
