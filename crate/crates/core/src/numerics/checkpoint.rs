use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Params, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned parameter document.
///
/// `meta` carries whatever the producer needs to rebuild the model around
/// the parameters (model kind, dimensions, entity indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: String,
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(model: impl Into<String>, meta: serde_json::Value, params: &Params) -> Self {
        let params = params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            model: model.into(),
            meta,
            params,
        }
    }

    pub fn params(&self) -> Result<Params> {
        self.params
            .iter()
            .map(|(k, r)| Ok((k.clone(), Tensor::new(r.shape.clone(), r.values.clone())?)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw.get("version").and_then(serde_json::Value::as_u64);
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::config(format!(
                "unsupported checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let ckpt: Checkpoint = serde_json::from_value(raw)?;
        for (name, r) in &ckpt.params {
            if r.shape.iter().product::<usize>() != r.values.len() {
                return Err(Error::config(format!("checkpoint block {name} has inconsistent shape")));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
