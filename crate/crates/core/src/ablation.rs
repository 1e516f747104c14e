//! Loss-component ablations sharing one teacher and one fold plan.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{split_group_by_trial, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::report::{AblationMask, RunReport};
use crate::training::{pretrain_teacher, run_cv_with, ExperimentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    /// The seven combinations of {sim, unc, kd}, task always on. Active
    /// terms keep the base weight, or 1 where the base weight is zero.
    pub fn standard(base: &LossWeights) -> Self {
        let on = |w: f64| if w > 0.0 { w } else { 1.0 };
        let combos = [
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (true, false, true),
            (false, true, true),
            (true, true, true),
        ];
        let rows = combos
            .into_iter()
            .map(|(s, u, k)| {
                let weights = LossWeights {
                    sim: if s { on(base.sim) } else { 0.0 },
                    unc: if u { on(base.unc) } else { 0.0 },
                    kd: if k { on(base.kd) } else { 0.0 },
                    task: on(base.task),
                };
                AblationRow {
                    name: AblationMask::from(&weights).label(),
                    weights,
                }
            })
            .collect();
        Self { rows }
    }

    pub fn single(weights: LossWeights) -> Self {
        Self {
            rows: vec![AblationRow {
                name: AblationMask::from(&weights).label(),
                weights,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for row in &self.rows {
            row.weights.validate()?;
            if row.weights.task <= 0.0 {
                return Err(Error::Config(format!(
                    "ablation row `{}` must keep the task loss",
                    row.name
                )));
            }
            let key = [row.weights.sim, row.weights.unc, row.weights.kd, row.weights.task].map(f64::to_bits);
            if !seen.insert(key) {
                return Err(Error::Config(format!(
                    "ablation row `{}` duplicates an earlier row",
                    row.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub entries: Vec<AblationEntry>,
}

impl AblationTable {
    pub fn metric_names(&self) -> Vec<String> {
        let names: BTreeSet<&String> = self.entries.iter().flat_map(|e| e.report.aggregate.keys()).collect();
        names.into_iter().cloned().collect()
    }

    /// One row per mask: weights then `mean,std` per metric at full precision.
    pub fn to_csv(&self) -> String {
        let metrics = self.metric_names();
        let mut out = String::from("row,lambda_sim,lambda_unc,lambda_kd,lambda_task");
        for m in &metrics {
            out.push_str(&format!(",{m}_mean,{m}_std"));
        }
        out.push('\n');
        for e in &self.entries {
            let w = &e.row.weights;
            out.push_str(&format!("{},{},{},{},{}", e.row.name, w.sim, w.unc, w.kd, w.task));
            for m in &metrics {
                match e.report.aggregate.get(m) {
                    Some(s) => out.push_str(&format!(",{},{}", s.mean, s.std)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// One cross-validated run per grid row, all sharing the teacher and folds
/// of the base configuration.
pub fn run_ablation(dataset: &Dataset, base: &ExperimentConfig, grid: &AblationGrid) -> Result<AblationTable> {
    grid.validate()?;
    base.validate(dataset)?;
    let plan = split_group_by_trial(dataset, base.train.folds, base.train.seed)?;
    let (teacher, summary) = pretrain_teacher(dataset, base)?;
    let mut entries = Vec::with_capacity(grid.rows.len());
    for row in &grid.rows {
        let config = ExperimentConfig {
            weights: row.weights,
            ..base.clone()
        };
        let outcome = run_cv_with(dataset, &config, plan.clone(), teacher.clone(), summary.clone())?;
        entries.push(AblationEntry {
            row: row.clone(),
            report: outcome.report,
        });
    }
    Ok(AblationTable { entries })
}
