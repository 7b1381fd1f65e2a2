//! JSON checkpoints: `{arch, layers: [{w, b}], meta: {seed, epoch}}`.
//!
//! Weights are flat row-major `in × out` arrays. Floats are written with the
//! shortest representation that round-trips exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::mlp::{Dense, MlpParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Vec<usize>,
    pub layers: Vec<LayerRecord>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_params(params: &MlpParams, meta: CheckpointMeta) -> Self {
        Self {
            arch: params.dims(),
            layers: params
                .layers
                .iter()
                .map(|l| LayerRecord {
                    w: l.weight.as_slice().to_vec(),
                    b: l.bias.clone(),
                })
                .collect(),
            meta,
        }
    }

    pub fn to_params(&self) -> Result<MlpParams> {
        if self.arch.len() != self.layers.len() + 1 {
            return Err(Error::dims("checkpoint layer count", self.arch.len().saturating_sub(1), self.layers.len()));
        }
        let layers = self
            .layers
            .iter()
            .zip(self.arch.windows(2))
            .map(|(rec, dims)| Dense::new(Matrix::from_vec(dims[0], dims[1], rec.w.clone())?, rec.b.clone()))
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
