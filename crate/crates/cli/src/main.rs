//! `cmkd`: generate data, train, evaluate, ablate and verify gradients.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use cmkd::ablation::run_ablation;
use cmkd::checkpoint::{Checkpoint, CheckpointMeta, ModelRole};
use cmkd::data::{load_dataset, Dataset};
use cmkd::gradcheck::{run_gradcheck, GradcheckConfig};
use cmkd::losses::Task;
use cmkd::prototypes::UncertaintyForm;
use cmkd::report::embeddings_csv;
use cmkd::training::{run_cv, score_predictions};
use serde::Serialize;

use config::CliConfig;

/// A usage or configuration problem; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "cmkd",
    version,
    about = "Uncertainty-aware cross-modal knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired-modality dataset.
    Generate(GenerateArgs),
    /// Pretrain the teacher, cross-validate the student, write report and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the loss-component ablation grid.
    Ablate(AblateArgs),
    /// Compare analytic gradients of every loss with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write student embeddings of every sample as CSV.
    ExportEmbeddings(ExportArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML config; only its [data] section is read.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    samples_per_trial: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    student_dim: Option<usize>,
    #[arg(long)]
    teacher_dim: Option<usize>,
    /// Label noise: flip probability (dec) or noise std (cer).
    #[arg(long, value_parser = unit_interval)]
    noise: Option<f64>,
    #[arg(long)]
    student_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Overrides {
    /// TOML config; flags win over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Parallel fold workers (default: one per fold).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda_sim: Option<f64>,
    #[arg(long)]
    lambda_unc: Option<f64>,
    #[arg(long)]
    lambda_kd: Option<f64>,
    #[arg(long)]
    lambda_task: Option<f64>,
    /// as_printed or inverse
    #[arg(long)]
    uncertainty_form: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<CliConfig> {
        let mut c = CliConfig::load(self.config.as_deref())?;
        let t = &mut c.train;
        set(&mut t.seed, self.seed);
        if let Some(epochs) = self.epochs {
            // a shortened run keeps a valid patience unless one is given
            t.epochs = epochs;
            t.patience = t.patience.min(epochs.max(1));
        }
        set(&mut t.teacher_epochs, self.teacher_epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.patience, self.patience);
        set(&mut t.folds, self.folds);
        set(&mut t.workers, self.workers);
        if let Some(form) = &self.uncertainty_form {
            t.uncertainty_form = match form.as_str() {
                "as_printed" => UncertaintyForm::AsPrinted,
                "inverse" => UncertaintyForm::Inverse,
                other => bail!(UsageError(format!("unknown uncertainty form `{other}`"))),
            };
        }
        let l = &mut c.loss;
        set(&mut l.beta, self.beta);
        set(&mut l.tau, self.tau);
        set(&mut l.delta, self.delta);
        set(&mut l.weights.sim, self.lambda_sim);
        set(&mut l.weights.unc, self.lambda_unc);
        set(&mut l.weights.kd, self.lambda_kd);
        set(&mut l.weights.task, self.lambda_task);
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Dataset CSV written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json and checkpoints.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Restrict to the validation trials recorded in the checkpoint.
    #[arg(long)]
    val_only: bool,
    /// Write the metrics JSON here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for ablation.csv and ablation.json.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = cmkd::gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Test hook: corrupt the analytic gradient of one kernel.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

/// Writes through a sibling temp file so readers never see partial output.
fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

fn write_all(dir: &Path, files: &[(String, String)]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, contents) in files {
        write_atomic(&dir.join(name), contents)?;
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let mut spec = CliConfig::load(args.config.as_deref())?.data;
    set(&mut spec.task, args.task);
    set(&mut spec.n_trials, args.trials);
    set(&mut spec.samples_per_trial, args.samples_per_trial);
    set(&mut spec.num_classes, args.classes);
    set(&mut spec.student_dim, args.student_dim);
    set(&mut spec.teacher_dim, args.teacher_dim);
    set(&mut spec.label_noise, args.noise);
    set(&mut spec.student_noise_scale, args.student_noise);
    set(&mut spec.seed, args.seed);
    let ds = cmkd::data::generate(&spec)?;
    write_atomic(&args.output, &ds.to_csv())?;
    eprintln!(
        "wrote {} samples in {} trials to {}",
        ds.len(),
        spec.n_trials,
        args.output.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = args.overrides.resolve()?;
    let ds = load_dataset(&args.data)?;
    let experiment = cfg.experiment();
    let out = run_cv(&ds, &experiment)?;
    let seed = experiment.train.seed;
    let mut files = vec![("report.json".to_string(), out.report.to_json())];
    let teacher_meta = CheckpointMeta {
        fold: None,
        validation_trials: vec![],
        seed,
    };
    let teacher = Checkpoint::new(
        &out.teacher,
        ModelRole::Teacher,
        ds.task,
        ds.num_classes,
        None,
        teacher_meta,
    );
    files.push(("teacher.json".into(), teacher.to_json()));
    for f in &out.folds {
        let meta = CheckpointMeta {
            fold: Some(f.report.fold),
            validation_trials: f.report.validation_trials.clone(),
            seed,
        };
        let ck = Checkpoint::new(
            &f.student,
            ModelRole::Student,
            ds.task,
            ds.num_classes,
            f.prototypes.as_ref(),
            meta,
        );
        files.push((format!("student_fold{}.json", f.report.fold), ck.to_json()));
    }
    write_all(&args.out, &files)?;
    println!("{}", out.report.summary());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    role: ModelRole,
    n_samples: usize,
    task_loss: f64,
    metrics: cmkd::report::MetricMap,
}

fn check_compatible(ck: &Checkpoint, ds: &Dataset) -> anyhow::Result<()> {
    if ck.task != ds.task || ck.num_classes != ds.num_classes {
        bail!(UsageError(format!(
            "checkpoint is for {} with {} classes, dataset is {} with {}",
            ck.task, ck.num_classes, ds.task, ds.num_classes
        )));
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    check_compatible(&ck, &ds)?;
    let model = ck.to_model()?;
    let indices = if args.val_only {
        if ck.meta.validation_trials.is_empty() {
            bail!(UsageError("checkpoint records no validation trials".into()));
        }
        let trials: BTreeSet<u64> = ck.meta.validation_trials.iter().copied().collect();
        ds.indices_for_trials(&trials)
    } else {
        ds.all_indices()
    };
    if indices.is_empty() {
        bail!("no samples to evaluate");
    }
    let inputs = match ck.role {
        ModelRole::Teacher => ds.teacher_inputs(&indices),
        ModelRole::Student => ds.student_inputs(&indices),
    };
    let eval = score_predictions(&ds, &indices, model.predict_values(&inputs)?)?;
    let text = serde_json::to_string_pretty(&EvalOutput {
        role: ck.role,
        n_samples: indices.len(),
        task_loss: eval.task_loss,
        metrics: eval.metrics,
    })?;
    match args.output {
        Some(path) => write_atomic(&path, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> anyhow::Result<()> {
    let cfg = args.overrides.resolve()?;
    let ds = load_dataset(&args.data)?;
    let table = run_ablation(&ds, &cfg.experiment(), &cfg.grid())?;
    write_all(
        &args.out,
        &[
            ("ablation.csv".into(), table.to_csv()),
            ("ablation.json".into(), table.to_json()),
        ],
    )?;
    let key = match ds.task {
        Task::Dec => ["accuracy", "macro_f1"],
        Task::Cer => ["rmse", "ccc"],
    };
    for e in &table.entries {
        let cols: Vec<String> = key
            .iter()
            .filter_map(|k| {
                e.report
                    .aggregate
                    .get(*k)
                    .map(|m| format!("{k} {:.3}±{:.3}", m.mean, m.std))
            })
            .collect();
        println!("{:<18} {}", e.row.name, cols.join("  "));
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let reports = run_gradcheck(&GradcheckConfig {
        instances: args.instances,
        seed: args.seed,
        tolerance: args.tolerance,
        corrupt: args.corrupt,
        ..Default::default()
    })?;
    for r in &reports {
        println!(
            "{:<9} {} max_rel_err={:.3e} instances={}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.instances
        );
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn export_embeddings(args: ExportArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    check_compatible(&ck, &ds)?;
    if ck.role != ModelRole::Student {
        bail!(UsageError("embedding export needs a student checkpoint".into()));
    }
    let csv = embeddings_csv(&ck.to_model()?, &ds, &ds.all_indices())?;
    write_atomic(&args.output, &csv)
}

/// The error chain joined with `: `, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err
        .chain()
        .any(|e| e.is::<UsageError>() || matches!(e.downcast_ref::<cmkd::Error>(), Some(cmkd::Error::Config(_))));
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::ExportEmbeddings(a) => export_embeddings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
