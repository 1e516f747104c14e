//! Teacher pretraining, per-fold student distillation and cross-validation.

mod adam;
mod config;
mod schedule;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

pub use adam::OptimizerState;
pub use config::{output_dim, ArchitectureConfig, ExperimentConfig, KdMode, ResolvedModels, TrainConfig};
pub use schedule::{EarlyStopState, LrSchedule, StopDecision};

use crate::data::{split_group_by_trial, Dataset, FoldPlan, Label};
use crate::error::{Error, Result};
use crate::instrument;
use crate::losses::{
    info_nce, loss_ccc, loss_ce, loss_kd, loss_total, similarity_matrix, LossConfig, LossParts, LossWeights, Task,
};
use crate::metrics::{accuracy, argmax_rows, ccc, macro_f1, pcc, rmse};
use crate::models::{BoundModel, ModelParams};
use crate::prototypes::{
    bin_labels, dirichlet_alpha, init_prototypes, loss_unc, uncertainty, PrototypeBank, UncertaintyForm,
};
use crate::report::{EpochRecord, FoldReport, LossBreakdown, MetricMap, RunReport, TeacherSummary};
use crate::seeded_rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

const TEACHER_STREAM: u64 = 1;
const FOLD_STREAM_BASE: u64 = 100;

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn observed(dataset: &Dataset, indices: &[usize]) -> Self {
        match dataset.task {
            Task::Dec => Targets::Classes(dataset.class_labels(indices)),
            Task::Cer => Targets::Values(dataset.value_labels(indices)),
        }
    }
}

/// Cross-entropy for classes, `1 − CCC` for values.
pub fn task_loss(tape: &mut Tape, logits: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Classes(y) => loss_ce(tape, logits, y),
        Targets::Values(y) => loss_ccc(tape, logits, y),
    }
}

/// Inputs of one distillation step, already registered on a tape.
pub struct StepInputs<'a> {
    pub student: &'a BoundModel,
    pub teacher: Option<&'a BoundModel>,
    pub phi: Option<Var>,
    pub x_s: Var,
    pub x_t: Option<Var>,
    pub targets: &'a Targets,
    pub task: Task,
    pub loss: &'a LossConfig,
    pub weights: &'a LossWeights,
    pub uncertainty_form: UncertaintyForm,
    pub injection_layer: usize,
    pub kd_mode: KdMode,
}

/// Builds the weighted total loss. Terms with zero weight are never
/// built, and the teacher is not run when no term needs it.
pub fn distillation_loss(tape: &mut Tape, inp: &StepInputs<'_>) -> Result<(Var, LossParts)> {
    let w = inp.weights;
    let (f_s, e_s) = inp.student.extract(tape, inp.x_s)?;
    let teacher = if w.sim > 0.0 || w.unc > 0.0 || w.kd > 0.0 {
        let t = inp
            .teacher
            .ok_or_else(|| Error::Config("alignment terms need a teacher".into()))?;
        let x_t = inp
            .x_t
            .ok_or_else(|| Error::Config("alignment terms need teacher inputs".into()))?;
        let (f_t, e_t) = t.extract(tape, x_t)?;
        Some((t, f_t, e_t))
    } else {
        None
    };

    let mut parts = LossParts::default();
    let y_s = if w.task > 0.0 || (w.kd > 0.0 && inp.kd_mode == KdMode::Logit) {
        Some(inp.student.head_forward(tape, f_s)?)
    } else {
        None
    };
    if w.task > 0.0 {
        parts.task = Some(task_loss(tape, y_s.expect("built above"), inp.targets)?);
    }
    if let Some((t, f_t, e_t)) = teacher {
        if w.needs_similarity() {
            let q = similarity_matrix(tape, e_s, e_t, inp.loss.beta)?;
            if w.sim > 0.0 {
                parts.sim = Some(info_nce(tape, q)?);
            }
            if w.unc > 0.0 {
                let phi = inp
                    .phi
                    .ok_or_else(|| Error::Config("uncertainty term needs a prototype bank".into()))?;
                let alpha = dirichlet_alpha(tape, e_s, phi, inp.loss.beta, inp.loss.tau)?;
                let u = uncertainty(tape, alpha, inp.uncertainty_form)?;
                parts.unc = Some(loss_unc(tape, u, q, inp.loss.delta)?);
            }
        }
        if w.kd > 0.0 {
            let y_t = t.head_forward(tape, f_t)?;
            let y_ts = match inp.kd_mode {
                KdMode::CrossHead => t.head_forward_from_layer(tape, f_s, inp.injection_layer)?,
                KdMode::Logit => y_s.expect("built above"),
            };
            parts.kd = Some(loss_kd(tape, y_t, y_ts, inp.task)?);
        }
    }
    let total = loss_total(tape, &parts, w)?;
    Ok((total, parts))
}

/// Shuffled mini-batches; a trailing batch smaller than two is merged into
/// the previous one since batch statistics need at least two rows.
fn batches<R: Rng + ?Sized>(indices: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn at_epoch(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Divergence {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        Error::Divergence { detail, .. } => Error::Divergence { epoch, detail },
        other => other,
    }
}

/// Validation loss and metrics of a model's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub task_loss: f64,
    pub metrics: MetricMap,
    pub predictions: Tensor,
}

/// Scores predictions against observed labels and, when present, clean labels.
pub fn score_predictions(dataset: &Dataset, indices: &[usize], predictions: Tensor) -> Result<Evaluation> {
    let targets = Targets::observed(dataset, indices);
    let mut tape = Tape::new();
    let p = tape.constant(&predictions);
    let loss = task_loss(&mut tape, p, &targets)?;
    let task_loss = tape.item(loss);
    let clean = dataset.clean_labels(indices);
    let mut metrics = MetricMap::new();
    match &targets {
        Targets::Classes(y) => {
            let pred = argmax_rows(&predictions);
            metrics.insert("accuracy".into(), accuracy(&pred, y)?);
            metrics.insert("macro_f1".into(), macro_f1(&pred, y, dataset.num_classes)?);
            if let Some(clean) = clean {
                let c: Vec<usize> = clean.iter().filter_map(|l| l.class()).collect();
                metrics.insert("clean_accuracy".into(), accuracy(&pred, &c)?);
                metrics.insert("clean_macro_f1".into(), macro_f1(&pred, &c, dataset.num_classes)?);
            }
        }
        Targets::Values(y) => {
            let pred = predictions.data();
            let mut regression = |prefix: &str, truth: &[f64]| -> Result<()> {
                metrics.insert(format!("{prefix}rmse"), rmse(pred, truth)?);
                // a constant predictor carries no linear correlation
                metrics.insert(format!("{prefix}pcc"), pcc(pred, truth).unwrap_or(0.0));
                metrics.insert(format!("{prefix}ccc"), ccc(pred, truth)?);
                Ok(())
            };
            regression("", y)?;
            if let Some(clean) = clean {
                let c: Vec<f64> = clean.iter().filter_map(|l: &Label| l.value()).collect();
                regression("clean_", &c)?;
            }
        }
    }
    Ok(Evaluation {
        task_loss,
        metrics,
        predictions,
    })
}

/// Student evaluation on the student modality.
pub fn evaluate(student: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let preds = student.predict_values(&dataset.student_inputs(indices))?;
    score_predictions(dataset, indices, preds)
}

/// Trains the teacher on the paired samples with the task loss only, then
/// freezes it. A held-out share of trials, if configured, early-stops the
/// pretraining and the best epoch is restored.
pub fn pretrain_teacher(dataset: &Dataset, config: &ExperimentConfig) -> Result<(ModelParams, TeacherSummary)> {
    let models = config.validate(dataset)?;
    let train = &config.train;
    let mut rng = seeded_rng(train.seed, TEACHER_STREAM);
    let mut teacher = ModelParams::new(models.teacher_extractor, models.teacher_head, &mut rng)?;
    let mut opt = OptimizerState::new(teacher.tensors_mut().into_iter().map(|t| &*t));

    let mut trials = dataset.trials();
    trials.shuffle(&mut rng);
    let n_hold = (trials.len() as f64 * train.teacher_holdout).round() as usize;
    let held: BTreeSet<u64> = trials[..n_hold.min(trials.len() - 1)].iter().copied().collect();
    let (fit_idx, hold_idx): (Vec<usize>, Vec<usize>) = dataset
        .all_indices()
        .into_iter()
        .partition(|&i| !held.contains(&dataset.samples[i].trial_id));

    let mut stopper = EarlyStopState::new(train.patience);
    let mut best: Option<(ModelParams, f64)> = None;
    let mut epochs_run = 0;
    for epoch in 0..train.teacher_epochs {
        let lr = train
            .schedule
            .rate(epoch, train.teacher_epochs, train.lr_start, train.lr_end);
        let mut sum = 0.0;
        let bs = batches(&fit_idx, train.batch_size, &mut rng);
        for batch in &bs {
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let bound = teacher.bind(&mut tape);
                let x = tape.constant(&dataset.teacher_inputs(batch));
                let (f, _) = bound.extract(&mut tape, x)?;
                let y = bound.head_forward(&mut tape, f)?;
                let loss = task_loss(&mut tape, y, &Targets::observed(dataset, batch))?;
                let value = tape.item(loss);
                let grads = tape.backward(loss)?;
                teacher.collect_grads(&bound, &grads)?;
                opt.step(&mut teacher.tensors_mut(), lr)?;
                Ok(value)
            };
            sum += step().map_err(at_epoch(epoch))?;
        }
        epochs_run = epoch + 1;
        let train_loss = sum / bs.len() as f64;
        if hold_idx.is_empty() {
            best = Some((teacher.clone(), train_loss));
            continue;
        }
        let preds = teacher.predict_values(&dataset.teacher_inputs(&hold_idx))?;
        let eval = score_predictions(dataset, &hold_idx, preds).map_err(at_epoch(epoch))?;
        match stopper.observe(epoch, eval.task_loss) {
            StopDecision::Improved => best = Some((teacher.clone(), train_loss)),
            StopDecision::Stop => break,
            StopDecision::Wait => {}
        }
    }
    let (mut teacher, final_train_loss) = best.expect("at least one epoch");
    teacher.freeze();
    let all = dataset.all_indices();
    let preds = teacher.predict_values(&dataset.teacher_inputs(&all))?;
    let eval = score_predictions(dataset, &all, preds)?;
    Ok((
        teacher,
        TeacherSummary {
            epochs: epochs_run,
            best_epoch: if hold_idx.is_empty() {
                epochs_run - 1
            } else {
                stopper.best_epoch()
            },
            holdout_trials: held.into_iter().collect(),
            final_train_loss,
            train_metrics: eval.metrics,
        },
    ))
}

/// Class-mean prototypes of the teacher embeddings on the training part.
pub fn teacher_prototypes(
    dataset: &Dataset,
    train_indices: &[usize],
    teacher: &ModelParams,
    config: &ExperimentConfig,
) -> Result<PrototypeBank> {
    let (_, e_t) = teacher.extract_values(&dataset.teacher_inputs(train_indices))?;
    match dataset.task {
        Task::Dec => init_prototypes(&e_t, &dataset.class_labels(train_indices), dataset.num_classes),
        Task::Cer => {
            let c = config.train.prototype_bins;
            init_prototypes(&e_t, &bin_labels(&dataset.value_labels(train_indices), c)?, c)
        }
    }
}

/// Result of one fold: the restored best-epoch student and its record.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub student: ModelParams,
    pub prototypes: Option<PrototypeBank>,
    pub report: FoldReport,
}

pub fn train_student_fold(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    teacher: &ModelParams,
    config: &ExperimentConfig,
) -> Result<FoldOutcome> {
    if !teacher.is_frozen() {
        return Err(Error::Invalid("student training needs a frozen teacher".into()));
    }
    let models = config.validate(dataset)?;
    let train = &config.train;
    let weights = &config.weights;
    let (train_idx, val_idx) = plan.split(dataset, fold);
    if train_idx.len() < 2 || val_idx.is_empty() {
        return Err(Error::Invalid(format!(
            "fold {fold} has {} training and {} validation samples",
            train_idx.len(),
            val_idx.len()
        )));
    }
    let before = instrument::snapshot();
    let mut rng = seeded_rng(train.seed, FOLD_STREAM_BASE + fold as u64);
    let mut student = ModelParams::new(models.student_extractor, models.student_head, &mut rng)?;
    let mut bank = if weights.unc > 0.0 {
        Some(teacher_prototypes(dataset, &train_idx, teacher, config)?)
    } else {
        None
    };
    let mut opt = {
        let mut params: Vec<&Tensor> = student.named_tensors().into_iter().map(|(_, t)| t).collect();
        params.extend(bank.as_ref().map(|b| &b.phi));
        OptimizerState::new(params)
    };
    let needs_teacher = weights.sim > 0.0 || weights.unc > 0.0 || weights.kd > 0.0;
    let mut stopper = EarlyStopState::new(train.patience);
    let mut best: Option<(ModelParams, Option<PrototypeBank>, MetricMap)> = None;
    let mut trace = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..train.epochs {
        let lr = train.schedule.rate(epoch, train.epochs, train.lr_start, train.lr_end);
        let bs = batches(&train_idx, train.batch_size, &mut rng);
        let mut sums = [0.0f64; 5];
        for batch in &bs {
            let mut step = || -> Result<[Option<f64>; 5]> {
                let mut tape = Tape::new();
                let sb = student.bind(&mut tape);
                let tb = needs_teacher.then(|| teacher.bind(&mut tape));
                let phi = bank.as_ref().map(|b| tape.leaf(&b.phi));
                let x_s = tape.constant(&dataset.student_inputs(batch));
                let x_t = needs_teacher.then(|| tape.constant(&dataset.teacher_inputs(batch)));
                let targets = Targets::observed(dataset, batch);
                let (total, parts) = distillation_loss(
                    &mut tape,
                    &StepInputs {
                        student: &sb,
                        teacher: tb.as_ref(),
                        phi,
                        x_s,
                        x_t,
                        targets: &targets,
                        task: dataset.task,
                        loss: &config.loss,
                        weights,
                        uncertainty_form: train.uncertainty_form,
                        injection_layer: config.model.injection_layer,
                        kd_mode: train.kd_mode,
                    },
                )?;
                let values = [Some(total), parts.sim, parts.unc, parts.kd, parts.task].map(|v| v.map(|v| tape.item(v)));
                let grads = tape.backward(total)?;
                student.collect_grads(&sb, &grads)?;
                let mut params = student.tensors_mut();
                if let (Some(b), Some(phi)) = (bank.as_mut(), phi) {
                    grads.write_into(phi, &mut b.phi)?;
                    params.push(&mut b.phi);
                }
                opt.step(&mut params, lr)?;
                Ok(values)
            };
            let values = step().map_err(at_epoch(epoch))?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v.unwrap_or(0.0);
            }
        }
        let n = bs.len() as f64;
        let mean_of = |i: usize, on: bool| on.then_some(sums[i] / n);
        let breakdown = LossBreakdown {
            total: sums[0] / n,
            sim: mean_of(1, weights.sim > 0.0),
            unc: mean_of(2, weights.unc > 0.0),
            kd: mean_of(3, weights.kd > 0.0),
            task: mean_of(4, weights.task > 0.0),
        };
        let eval = evaluate(&student, dataset, &val_idx).map_err(at_epoch(epoch))?;
        let decision = stopper.observe(epoch, eval.task_loss);
        trace.push(EpochRecord {
            epoch,
            lr,
            train: breakdown,
            val_task_loss: eval.task_loss,
            val_metrics: eval.metrics.clone(),
        });
        match decision {
            StopDecision::Improved => best = Some((student.clone(), bank.clone(), eval.metrics)),
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
            StopDecision::Wait => {}
        }
    }

    let counters = instrument::snapshot() - before;
    let (mut student, prototypes, metrics) = best.expect("first epoch always improves");
    for t in student.tensors_mut() {
        t.zero_grad();
    }
    let validation_trials = plan.trials_in(fold).into_iter().collect();
    Ok(FoldOutcome {
        student,
        prototypes,
        report: FoldReport {
            fold,
            validation_trials,
            n_train: train_idx.len(),
            n_val: val_idx.len(),
            epochs_run: trace.len(),
            best_epoch: stopper.best_epoch(),
            stopped_early,
            best_val_task_loss: stopper.best().expect("observed at least once"),
            metrics,
            trace,
            counters,
        },
    })
}

/// Trains every fold, in parallel when `train.workers` allows.
pub fn run_folds(
    dataset: &Dataset,
    plan: &FoldPlan,
    teacher: &ModelParams,
    config: &ExperimentConfig,
) -> Result<Vec<FoldOutcome>> {
    let k = plan.k;
    let workers = config.train.worker_count().max(1);
    let annotate = |fold: usize, r: Result<FoldOutcome>| {
        r.map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })
    };
    if workers == 1 {
        return (0..k)
            .map(|f| annotate(f, train_student_fold(dataset, plan, f, teacher, config)))
            .collect();
    }
    let mut results: Vec<(usize, Result<FoldOutcome>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..k)
                        .step_by(workers)
                        .map(|f| (f, train_student_fold(dataset, plan, f, teacher, config)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("fold worker panicked"))
            .collect()
    });
    results.sort_by_key(|(f, _)| *f);
    results.into_iter().map(|(f, r)| annotate(f, r)).collect()
}

/// Output of a cross-validated run.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: RunReport,
    pub teacher: ModelParams,
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutcome>,
}

/// Pretrains the teacher once, then trains and validates each fold.
pub fn run_cv(dataset: &Dataset, config: &ExperimentConfig) -> Result<CvOutcome> {
    config.validate(dataset)?;
    let plan = split_group_by_trial(dataset, config.train.folds, config.train.seed)?;
    let (teacher, summary) = pretrain_teacher(dataset, config)?;
    run_cv_with(dataset, config, plan, teacher, summary)
}

/// Cross-validation with a given fold plan and pretrained teacher.
pub fn run_cv_with(
    dataset: &Dataset,
    config: &ExperimentConfig,
    plan: FoldPlan,
    teacher: ModelParams,
    summary: TeacherSummary,
) -> Result<CvOutcome> {
    if plan.k != config.train.folds {
        return Err(Error::Config(format!(
            "fold plan has {} folds, config expects {}",
            plan.k, config.train.folds
        )));
    }
    let folds = run_folds(dataset, &plan, &teacher, config)?;
    let report = RunReport::new(
        dataset,
        config,
        summary,
        folds.iter().map(|f| f.report.clone()).collect(),
    );
    Ok(CvOutcome {
        report,
        teacher,
        plan,
        folds,
    })
}
