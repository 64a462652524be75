//! JSON checkpoints.
//!
//! ```text
//! {
//!   "format": "tandem-checkpoint-v1",
//!   "config": { ...TandemConfig... },
//!   "params": [ { "name": "...", "shape": [..], "data": "<base64>" }, ... ]
//! }
//! ```
//!
//! `data` is the base64 (standard alphabet, padded) encoding of the
//! parameter's values as little-endian IEEE-754 doubles in row-major order.
//! Loading rebuilds the model from `config` and overwrites every parameter by
//! name, so values round-trip bit for bit.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TandemConfig, TandemModel};
use crate::tensor::Tensor;

pub const FORMAT: &str = "tandem-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: TandemConfig,
    params: Vec<ParamRecord>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str) -> Result<Vec<f64>, CheckpointError> {
    let bytes = STANDARD.decode(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Format(format!("{} bytes is not a whole number of doubles", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn to_json(model: &TandemModel) -> String {
    let ck = Checkpoint {
        format: FORMAT.into(),
        config: model.config.clone(),
        params: model
            .params
            .entries()
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                data: encode(e.value.data()),
            })
            .collect(),
    };
    serde_json::to_string(&ck).expect("checkpoint serializes")
}

pub fn from_json(text: &str) -> Result<TandemModel, CheckpointError> {
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if ck.format != FORMAT {
        return Err(CheckpointError::Format(format!("unknown format {:?}", ck.format)));
    }
    let mut model = TandemModel::new(ck.config)?;
    if ck.params.len() != model.params.len() {
        return Err(CheckpointError::Format(format!(
            "{} parameters stored, model has {}",
            ck.params.len(),
            model.params.len()
        )));
    }
    for rec in ck.params {
        let id = model
            .params
            .find(&rec.name)
            .ok_or_else(|| CheckpointError::Format(format!("unknown parameter {:?}", rec.name)))?;
        if model.params.get(id).shape() != rec.shape.as_slice() {
            return Err(CheckpointError::Format(format!(
                "parameter {:?} has shape {:?}, expected {:?}",
                rec.name,
                rec.shape,
                model.params.get(id).shape()
            )));
        }
        let tensor = Tensor::new(rec.shape, decode(&rec.data)?).map_err(|e| CheckpointError::Format(e.to_string()))?;
        *model.params.get_mut(id) = tensor;
    }
    Ok(model)
}

pub fn save(model: &TandemModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, to_json(model)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<TandemModel, CheckpointError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_json(&text)
}
