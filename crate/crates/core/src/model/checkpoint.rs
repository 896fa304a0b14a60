//! Versioned JSON checkpoints. Floats round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphTransformer, InputSpec, ModelConfig, ModelParams, Standardizer};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stored {
    version: u32,
    model: ModelConfig,
    input: InputSpec,
    standardizer: Standardizer,
    seed: u64,
    epoch: usize,
    params: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub input: InputSpec,
    pub standardizer: Standardizer,
    pub seed: u64,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn architecture(&self) -> Result<GraphTransformer> {
        let m = GraphTransformer::new(self.model)?;
        m.check_params(&self.params)?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = Stored {
            version: CHECKPOINT_VERSION,
            model: self.model,
            input: self.input,
            standardizer: self.standardizer.clone(),
            seed: self.seed,
            epoch: self.epoch,
            params: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("version").and_then(|v| v.as_u64());
        if found != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Version {
                found: found.unwrap_or(0) as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let s: Stored = serde_json::from_value(raw)?;
        let mut names = Vec::with_capacity(s.params.len());
        let mut tensors = Vec::with_capacity(s.params.len());
        for p in s.params {
            tensors.push(Tensor::new(p.shape, p.data)?);
            names.push(p.name);
        }
        let ck = Checkpoint {
            model: s.model,
            input: s.input,
            standardizer: s.standardizer,
            seed: s.seed,
            epoch: s.epoch,
            params: ModelParams { names, tensors },
        };
        ck.architecture()?;
        if ck.input.width() != ck.model.f_in {
            return Err(Error::Config(format!(
                "input spec provides {} features, model expects {}",
                ck.input.width(),
                ck.model.f_in
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
