//! Versioned JSON checkpoints of trained models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Task;
use crate::models::{ExtractorConfig, HeadConfig, ModelParams};
use crate::prototypes::{PrototypeBank, PrototypeSource};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "cmkd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fold: Option<usize>,
    pub validation_trials: Vec<u64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub role: ModelRole,
    pub task: Task,
    pub num_classes: usize,
    pub extractor: ExtractorConfig,
    pub head: HeadConfig,
    pub params: Vec<NamedTensor>,
    pub prototypes: Option<NamedTensor>,
    pub meta: CheckpointMeta,
}

fn named(name: &str, t: &Tensor) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

impl Checkpoint {
    pub fn new(
        model: &ModelParams,
        role: ModelRole,
        task: Task,
        num_classes: usize,
        prototypes: Option<&PrototypeBank>,
        meta: CheckpointMeta,
    ) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            role,
            task,
            num_classes,
            extractor: model.extractor_config.clone(),
            head: model.head_config.clone(),
            params: model.named_tensors().into_iter().map(|(n, t)| named(&n, t)).collect(),
            prototypes: prototypes.map(|b| named("prototypes", &b.phi)),
            meta,
        }
    }

    /// Rebuilds the model; teachers come back frozen.
    pub fn to_model(&self) -> Result<ModelParams> {
        let mut model = ModelParams::zeros(self.extractor.clone(), self.head.clone())?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.params.len()
            )));
        }
        for ((name, slot), saved) in names.iter().zip(model.tensors_mut()).zip(&self.params) {
            if &saved.name != name || saved.shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {:?}",
                    saved.name,
                    saved.shape,
                    slot.shape()
                )));
            }
            slot.set_data(saved.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if self.role == ModelRole::Teacher {
            model.freeze();
        }
        Ok(model)
    }

    pub fn prototype_bank(&self) -> Result<Option<PrototypeBank>> {
        self.prototypes
            .as_ref()
            .map(|p| {
                let phi = Tensor::new(p.shape.clone(), p.data.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
                PrototypeBank::new(phi, PrototypeSource::Learned)
            })
            .transpose()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed: {e}")))?;
        if ck.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic `{}`", ck.magic)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
