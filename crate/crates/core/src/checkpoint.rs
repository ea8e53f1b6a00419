//! Checkpoint serialization.
//!
//! Layout (JSON, version 1):
//!
//! ```text
//! {
//!   "format": "tkgr-checkpoint",
//!   "version": 1,
//!   "config": { ...full model configuration... },
//!   "params": [ { "name": "...", "shape": [..], "data": [..] }, ... ]
//! }
//! ```
//!
//! Parameter names and order follow `Model::named_params`. Values are f64
//! and round-trip exactly through JSON.

use crate::error::ModelError;
use crate::model::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use tkgr_grad::Tensor;

const FORMAT: &str = "tkgr-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

pub fn save(model: &Model, path: &Path) -> Result<(), ModelError> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        params: model
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&file).map_err(|e| ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, json).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Model, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if file.format != FORMAT {
        return Err(ModelError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unknown format {:?}", file.format),
        });
    }
    if file.version != VERSION {
        return Err(ModelError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unsupported version {}", file.version),
        });
    }
    // start from a freshly shaped model, then overwrite every parameter
    let mut model = Model::init(file.config, 0)?;
    let mut by_name: std::collections::BTreeMap<String, NamedTensor> = file
        .params
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect();
    for (name, param) in model.named_params_mut() {
        let stored = by_name.remove(&name).ok_or_else(|| ModelError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing parameter {name:?}"),
        })?;
        if stored.shape != param.shape() {
            return Err(ModelError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    stored.shape,
                    param.shape()
                ),
            });
        }
        *param = Tensor::new(stored.shape, stored.data);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(ModelError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unexpected parameter {extra:?}"),
        });
    }
    Ok(model)
}
