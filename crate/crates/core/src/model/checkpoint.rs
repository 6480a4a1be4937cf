//! JSON checkpoints: configuration, parameters and free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tracegrad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialised form of a trained [`Model`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Seed the parameter layout was created with.
    pub seed: u64,
    /// Training settings and results (λ, epochs, validation loss, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    /// `(name, rows, cols)` in registration order.
    pub shapes: Vec<(String, usize, usize)>,
    pub params: Vec<f64>,
    /// Hex SHA-256 of the little-endian parameter bytes.
    pub checksum: String,
}

fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        let store = model.params();
        let params = store.flat();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            seed,
            metadata,
            shapes: store
                .ids()
                .map(|id| {
                    let m = store.get(id);
                    (store.name(id).to_string(), m.rows(), m.cols())
                })
                .collect(),
            checksum: checksum(&params),
            params,
        }
    }

    /// Rebuild the model, checking layout and checksum.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if checksum(&self.params) != self.checksum {
            return Err(Error::Config("checkpoint checksum mismatch".into()));
        }
        let mut model = Model::new(self.config.clone(), self.seed)?;
        let store = model.params();
        let layout: Vec<(String, usize, usize)> = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).rows(), store.get(id).cols()))
            .collect();
        if layout != self.shapes {
            return Err(Error::Config("checkpoint parameter layout does not match its config".into()));
        }
        model.params_mut().set_flat(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Config(format!("serialising checkpoint: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
