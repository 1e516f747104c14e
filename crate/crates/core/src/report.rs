//! Run reports: per-fold records, traces and aggregates, serialized as JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, Label};
use crate::error::{Error, Result};
use crate::instrument::Counters;
use crate::losses::{LossWeights, Task};
use crate::metrics::{mean_std, MeanStd};
use crate::models::ModelParams;
use crate::training::ExperimentConfig;

pub const REPORT_SCHEMA: &str = "cmkd.run_report";
pub const REPORT_VERSION: u32 = 1;

/// Metric name to value, ordered for stable output.
pub type MetricMap = BTreeMap<String, f64>;

/// Which loss terms were active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub sim: bool,
    pub unc: bool,
    pub kd: bool,
    pub task: bool,
}

impl From<&LossWeights> for AblationMask {
    fn from(w: &LossWeights) -> Self {
        Self {
            sim: w.sim > 0.0,
            unc: w.unc > 0.0,
            kd: w.kd > 0.0,
            task: w.task > 0.0,
        }
    }
}

impl AblationMask {
    /// Short name such as `sim+kd+task`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.sim, "sim"),
            (self.unc, "unc"),
            (self.kd, "kd"),
            (self.task, "task"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        names.join("+")
    }
}

/// Batch-averaged training losses of one epoch. Terms that were not built are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: Option<f64>,
    pub unc: Option<f64>,
    pub kd: Option<f64>,
    pub task: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_task_loss: f64,
    pub val_metrics: MetricMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub validation_trials: Vec<u64>,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_val_task_loss: f64,
    /// Validation metrics of the restored best-epoch student.
    pub metrics: MetricMap,
    pub trace: Vec<EpochRecord>,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    /// Trials used only to early-stop pretraining.
    pub holdout_trials: Vec<u64>,
    /// Training loss of the restored epoch.
    pub final_train_loss: f64,
    /// Metrics over every sample in the dataset.
    pub train_metrics: MetricMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub version: u32,
    pub task: Task,
    pub seed: u64,
    pub n_samples: usize,
    pub n_trials: usize,
    pub config: ExperimentConfig,
    pub mask: AblationMask,
    pub teacher: TeacherSummary,
    pub folds: Vec<FoldReport>,
    pub aggregate: BTreeMap<String, MeanStd>,
}

/// Mean and sample std across folds of every metric plus the best validation loss.
pub fn aggregate(folds: &[FoldReport]) -> BTreeMap<String, MeanStd> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in folds {
        for (k, v) in &f.metrics {
            columns.entry(k.clone()).or_default().push(*v);
        }
        columns
            .entry("best_val_task_loss".into())
            .or_default()
            .push(f.best_val_task_loss);
    }
    columns.into_iter().map(|(k, v)| (k, mean_std(&v))).collect()
}

impl RunReport {
    pub fn new(
        dataset: &Dataset,
        config: &ExperimentConfig,
        teacher: TeacherSummary,
        mut folds: Vec<FoldReport>,
    ) -> Self {
        folds.sort_by_key(|f| f.fold);
        Self {
            schema: REPORT_SCHEMA.into(),
            version: REPORT_VERSION,
            task: dataset.task,
            seed: config.train.seed,
            n_samples: dataset.len(),
            n_trials: dataset.trials().len(),
            config: config.clone(),
            mask: AblationMask::from(&config.weights),
            teacher,
            aggregate: aggregate(&folds),
            folds,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).map(|m| m.mean)
    }

    /// Summed instrumentation counters across folds.
    pub fn counters(&self) -> Counters {
        self.folds.iter().fold(Counters::default(), |acc, f| Counters {
            similarity: acc.similarity + f.counters.similarity,
            prototype: acc.prototype + f.counters.prototype,
            injection: acc.injection + f.counters.injection,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("malformed run report: {e}")))?;
        if report.schema != REPORT_SCHEMA || report.version != REPORT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported report schema {} v{}",
                report.schema, report.version
            )));
        }
        Ok(report)
    }

    /// One `metric: mean±std` line per aggregate, three decimals.
    pub fn summary(&self) -> String {
        self.aggregate
            .iter()
            .map(|(k, m)| format!("{k}: {:.3}±{:.3}", m.mean, m.std))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// CSV rows `trial_id,y,e_0..e_{d-1}` of the student embeddings for `indices`.
pub fn embeddings_csv(model: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<String> {
    let x = dataset.student_inputs(indices);
    let (_, e) = model.extract_values(&x)?;
    let d = e.cols();
    let mut out = String::from("trial_id,y");
    for j in 0..d {
        out.push_str(&format!(",e_{j}"));
    }
    out.push('\n');
    for (row, &i) in indices.iter().enumerate() {
        let s = &dataset.samples[i];
        let y = match s.label {
            Label::Class(c) => c.to_string(),
            Label::Value(v) => fmt_f64(v),
        };
        out.push_str(&format!("{},{y}", s.trial_id));
        for v in e.row(row) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(model: &ModelParams, dataset: &Dataset, path: &Path) -> Result<()> {
    let csv = embeddings_csv(model, dataset, &dataset.all_indices())?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(i: usize, acc: f64) -> FoldReport {
        FoldReport {
            fold: i,
            validation_trials: vec![i as u64],
            n_train: 4,
            n_val: 1,
            epochs_run: 1,
            best_epoch: 0,
            stopped_early: false,
            best_val_task_loss: 0.5,
            metrics: MetricMap::from([("accuracy".to_string(), acc)]),
            trace: vec![],
            counters: Counters::default(),
        }
    }

    #[test]
    fn identical_folds_have_zero_std() {
        let agg = aggregate(&[fold(0, 0.7), fold(1, 0.7), fold(2, 0.7)]);
        assert_eq!(agg["accuracy"], MeanStd { mean: 0.7, std: 0.0 });
        assert_eq!(agg["best_val_task_loss"].mean, 0.5);
    }

    #[test]
    fn mask_labels() {
        assert_eq!(AblationMask::from(&LossWeights::ALL).label(), "sim+unc+kd+task");
        assert_eq!(AblationMask::from(&LossWeights::TASK_ONLY).label(), "task");
    }
}
