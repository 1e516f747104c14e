use serde::{Deserialize, Serialize};

use super::schedule::LrSchedule;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights, Task};
use crate::models::{check_injection, Activation, ExtractorConfig, HeadConfig};
use crate::prototypes::UncertaintyForm;

/// Which student output the distillation term compares with the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    /// Student features routed through the frozen teacher head.
    #[default]
    CrossHead,
    /// Plain logit distillation against the student's own head.
    Logit,
}

/// Layer widths for both networks. Input and output widths come from the
/// dataset at resolve time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub activation: Activation,
    pub embed_dim: usize,
    pub student_hidden: Vec<usize>,
    pub student_feature_dim: usize,
    /// Hidden widths of the student head; the output layer is appended.
    pub student_head_hidden: Vec<usize>,
    pub teacher_hidden: Vec<usize>,
    pub teacher_feature_dim: usize,
    pub teacher_head_hidden: Vec<usize>,
    pub injection_layer: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Relu,
            embed_dim: 16,
            student_hidden: vec![32],
            student_feature_dim: 16,
            student_head_hidden: vec![16],
            teacher_hidden: vec![64],
            teacher_feature_dim: 32,
            teacher_head_hidden: vec![16],
            injection_layer: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedModels {
    pub student_extractor: ExtractorConfig,
    pub student_head: HeadConfig,
    pub teacher_extractor: ExtractorConfig,
    pub teacher_head: HeadConfig,
}

pub fn output_dim(task: Task, num_classes: usize) -> usize {
    match task {
        Task::Dec => num_classes,
        Task::Cer => 1,
    }
}

impl ArchitectureConfig {
    pub fn resolve(&self, dataset: &Dataset) -> Result<ResolvedModels> {
        let out = output_dim(dataset.task, dataset.num_classes);
        let extractor = |input_dim, hidden: &Vec<usize>, feature_dim| ExtractorConfig {
            input_dim,
            hidden_dims: hidden.clone(),
            feature_dim,
            embed_dim: self.embed_dim,
            activation: self.activation,
        };
        let head = |hidden: &Vec<usize>| {
            let mut layer_dims = hidden.clone();
            layer_dims.push(out);
            HeadConfig {
                layer_dims,
                injection_layer: self.injection_layer,
            }
        };
        let models = ResolvedModels {
            student_extractor: extractor(dataset.student_dim, &self.student_hidden, self.student_feature_dim),
            student_head: head(&self.student_head_hidden),
            teacher_extractor: extractor(dataset.teacher_dim, &self.teacher_hidden, self.teacher_feature_dim),
            teacher_head: head(&self.teacher_head_hidden),
        };
        models.student_extractor.validate()?;
        models.teacher_extractor.validate()?;
        models.student_head.validate()?;
        models.teacher_head.validate()?;
        check_injection(
            &models.student_extractor,
            &models.teacher_extractor,
            &models.teacher_head,
        )?;
        Ok(models)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: LrSchedule,
    pub patience: usize,
    /// Number of cross-validation folds.
    pub folds: usize,
    pub seed: u64,
    pub teacher_epochs: usize,
    /// Fraction of trials held out to early-stop teacher pretraining; 0
    /// trains on every trial for all `teacher_epochs`.
    pub teacher_holdout: f64,
    /// Parallel fold workers; 0 means one per fold.
    pub workers: usize,
    pub uncertainty_form: UncertaintyForm,
    /// Prototype count for regression, via equal-width label bins.
    pub prototype_bins: usize,
    pub kd_mode: KdMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-6,
            schedule: LrSchedule::Cosine,
            patience: 20,
            folds: 5,
            seed: 0,
            teacher_epochs: 100,
            teacher_holdout: 0.2,
            workers: 0,
            uncertainty_form: UncertaintyForm::AsPrinted,
            prototype_bins: 3,
            kd_mode: KdMode::CrossHead,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.teacher_epochs == 0 {
            return Err(Error::Config(
                "train.epochs and train.teacher_epochs must be >= 1".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.patience == 0 || self.patience > self.epochs {
            return Err(Error::Config(format!(
                "train.patience must be in 1..={}, got {}",
                self.epochs, self.patience
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("train.folds must be >= 2, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.teacher_holdout) {
            return Err(Error::Config(format!(
                "train.teacher_holdout must be in [0, 1), got {}",
                self.teacher_holdout
            )));
        }
        if self.prototype_bins < 2 {
            return Err(Error::Config("train.prototype_bins must be >= 2".into()));
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        if self.workers == 0 {
            self.folds
        } else {
            self.workers.min(self.folds)
        }
    }
}

/// Everything a cross-validated run needs besides the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ArchitectureConfig,
    pub loss: LossConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self, dataset: &Dataset) -> Result<ResolvedModels> {
        self.loss.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        dataset.validate()?;
        let trials = dataset.trials().len();
        if trials < self.train.folds {
            return Err(Error::Config(format!(
                "{trials} trials cannot fill {} folds",
                self.train.folds
            )));
        }
        self.model.resolve(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let cfg = ExperimentConfig::default();
        cfg.train.validate().unwrap();
        assert_eq!(cfg.train.lr_start, 1e-3);
        assert_eq!(cfg.train.lr_end, 1e-6);
        assert_eq!(cfg.train.patience, 20);
        assert_eq!(cfg.train.folds, 5);
        assert_eq!(cfg.train.worker_count(), 5);
    }

    #[test]
    fn rejects_bad_schedule_and_patience() {
        let mut t = TrainConfig {
            lr_end: 1e-2,
            ..Default::default()
        };
        assert!(t.validate().is_err());
        t = TrainConfig {
            patience: 101,
            ..Default::default()
        };
        assert!(t.validate().is_err());
        t = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }
}
