use std::path::Path;

use cmkd::ablation::{AblationGrid, AblationRow};
use cmkd::data::GeneratorSpec;
use cmkd::losses::{LossConfig, LossWeights};
use cmkd::training::{ArchitectureConfig, ExperimentConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub beta: f64,
    pub tau: f64,
    pub delta: f64,
    pub weights: LossWeights,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossConfig::default();
        Self {
            beta: c.beta,
            tau: c.tau,
            delta: c.delta,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Ablation rows; the standard seven when absent.
    pub ablation: Option<Vec<AblationRow>>,
}

/// The on-disk TOML document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub data: GeneratorSpec,
    pub model: ArchitectureConfig,
    pub loss: LossSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            loss: LossConfig {
                beta: self.loss.beta,
                tau: self.loss.tau,
                delta: self.loss.delta,
            },
            weights: self.loss.weights,
            train: self.train.clone(),
        }
    }

    pub fn grid(&self) -> AblationGrid {
        match &self.eval.ablation {
            Some(rows) => AblationGrid { rows: rows.clone() },
            None => AblationGrid::standard(&self.loss.weights),
        }
    }
}
