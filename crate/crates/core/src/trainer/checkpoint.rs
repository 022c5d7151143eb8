use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig};
use crate::flow::{FlowModel, ModelConfig, StatsStore};
use crate::ndtensor::{ParamKind, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "nvp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Everything needed to resume training or evaluate a model, serialized as
/// self-describing JSON. Floats round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// SHA-256 of the model topology.
    pub config_hash: String,
    pub config: TrainConfig,
    pub step: u64,
    pub params: Vec<SavedParam>,
    pub stats: StatsStore,
    pub adam: AdamState,
}

/// Hex SHA-256 of the canonical JSON encoding of a model topology.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("model config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, step: u64, model: &FlowModel, adam: &AdamState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&config.model),
            config: config.clone(),
            step,
            params: model
                .params()
                .iter()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
            stats: model.stats().clone(),
            adam: adam.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.verify()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn verify(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let expected = config_hash(&self.config.model);
        if self.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "topology hash mismatch: stored {}, computed {expected}",
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Rebuild the model this checkpoint describes.
    pub fn model(&self) -> Result<FlowModel> {
        self.verify()?;
        let mut model = FlowModel::new(self.config.model.clone(), self.config.seed)?;
        if model.params().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} saved parameters for a topology with {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for saved in &self.params {
            let id = model
                .params()
                .by_name(&saved.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", saved.name)))?;
            let p = model.params_mut().get_mut(id);
            if p.tensor.shape() != saved.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    saved.name,
                    p.tensor.shape(),
                    saved.shape
                )));
            }
            p.tensor = Tensor::new(saved.shape.clone(), saved.data.clone())?;
        }
        let fresh = model.stats();
        let compatible = fresh.len() == self.stats.len()
            && fresh
                .iter()
                .zip(self.stats.iter())
                .all(|(a, b)| a.name == b.name && a.mean.len() == b.mean.len() && b.var.len() == b.mean.len());
        if !compatible {
            return Err(Error::Checkpoint("batch-norm statistics do not match the topology".into()));
        }
        *model.stats_mut() = self.stats.clone();
        self.adam.check_matches(model.params())?;
        Ok(model)
    }
}
