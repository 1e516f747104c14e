//! Paired student/teacher samples: a synthetic generator with controllable
//! label noise, the on-disk CSV format, and group-by-trial fold assignment.
//!
//! # File format
//!
//! ```text
//! #cmkd v1 task=<dec|cer> S=<int> T=<int> C=<int|0>
//! trial_id,y,xs_0,..,xs_{S-1},xt_0,..,xt_{T-1}
//! <trial_id>,<y>,<S student values>,<T teacher values>
//! ```
//!
//! `y` is a class index for `dec` and a decimal for `cer` (where `C=0`).
//! Decimals are written with 17 significant digits. Samples of one trial
//! form one contiguous block of rows; the position inside the block is the
//! sample index, so a trial block that reappears later in the file is
//! rejected as a duplicate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Label::Value(v) => Some(v),
            Label::Class(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub trial_id: u64,
    /// Student (lower-quality) modality.
    pub x_s: Vec<f64>,
    /// Teacher (higher-quality) modality.
    pub x_t: Vec<f64>,
    /// Observed, possibly noisy label.
    pub label: Label,
    clean: Option<Label>,
}

impl PairedSample {
    pub fn new(trial_id: u64, x_s: Vec<f64>, x_t: Vec<f64>, label: Label) -> Self {
        Self {
            trial_id,
            x_s,
            x_t,
            label,
            clean: None,
        }
    }

    /// Noise-free label kept by the generator for diagnostics. Training
    /// never reads it.
    pub fn clean_label(&self) -> Option<Label> {
        self.clean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    /// Number of classes for DEC, 0 for CER.
    pub num_classes: usize,
    pub student_dim: usize,
    pub teacher_dim: usize,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct trial ids in ascending order.
    pub fn trials(&self) -> Vec<u64> {
        self.samples
            .iter()
            .map(|s| s.trial_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn student_inputs(&self, indices: &[usize]) -> Tensor {
        let data = indices
            .iter()
            .flat_map(|&i| self.samples[i].x_s.iter().copied())
            .collect();
        Tensor::matrix(indices.len(), self.student_dim, data).expect("validated widths")
    }

    pub fn teacher_inputs(&self, indices: &[usize]) -> Tensor {
        let data = indices
            .iter()
            .flat_map(|&i| self.samples[i].x_t.iter().copied())
            .collect();
        Tensor::matrix(indices.len(), self.teacher_dim, data).expect("validated widths")
    }

    pub fn class_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .map(|&i| self.samples[i].label.class().expect("DEC label"))
            .collect()
    }

    pub fn value_labels(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .map(|&i| self.samples[i].label.value().expect("CER label"))
            .collect()
    }

    pub fn clean_labels(&self, indices: &[usize]) -> Option<Vec<Label>> {
        indices.iter().map(|&i| self.samples[i].clean).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).collect()
    }

    /// Indices of samples whose trial is in `trials`.
    pub fn indices_for_trials(&self, trials: &BTreeSet<u64>) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| trials.contains(&self.samples[i].trial_id))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Dec if self.num_classes < 2 => {
                return Err(Error::Invalid(format!(
                    "DEC data needs at least 2 classes, got {}",
                    self.num_classes
                )))
            }
            Task::Cer if self.num_classes != 0 => return Err(Error::Invalid("CER data must declare C=0".into())),
            _ => {}
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.x_s.len() != self.student_dim || s.x_t.len() != self.teacher_dim {
                return Err(Error::Invalid(format!(
                    "sample {i} has widths ({}, {})",
                    s.x_s.len(),
                    s.x_t.len()
                )));
            }
            match (self.task, s.label) {
                (Task::Dec, Label::Class(c)) if c < self.num_classes => {}
                (Task::Cer, Label::Value(v)) if v.is_finite() => {}
                _ => {
                    return Err(Error::Invalid(format!(
                        "sample {i} has label {:?} unsuitable for {}",
                        s.label, self.task
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "#cmkd v1 task={} S={} T={} C={}",
            self.task, self.student_dim, self.teacher_dim, self.num_classes
        );
        out.push_str("trial_id,y");
        for j in 0..self.student_dim {
            let _ = write!(out, ",xs_{j}");
        }
        for j in 0..self.teacher_dim {
            let _ = write!(out, ",xt_{j}");
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{}", s.trial_id);
            match s.label {
                Label::Class(c) => {
                    let _ = write!(out, ",{c}");
                }
                Label::Value(v) => {
                    let _ = write!(out, ",{}", fmt_f64(v));
                }
            }
            for v in s.x_s.iter().chain(&s.x_t) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// 17 significant digits: enough for an exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("#cmkd") || fields.next() != Some("v1") {
        return Err(err(1, format!("expected `#cmkd v1 ...` header, got `{header}`")));
    }
    let mut kv = BTreeMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| err(1, format!("malformed header field `{f}`")))?;
        if kv.insert(k, v).is_some() {
            return Err(err(1, format!("repeated header field `{k}`")));
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| err(1, format!("header is missing `{k}`")))
    };
    let task: Task = get("task")?.parse().map_err(|e| err(1, e))?;
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| err(1, format!("header field `{k}` is not an integer")))
    };
    let (s_dim, t_dim, classes) = (int("S")?, int("T")?, int("C")?);
    if kv.len() != 4 {
        return Err(err(1, format!("unexpected header fields in `{header}`")));
    }
    match task {
        Task::Dec if classes < 2 => return Err(err(1, format!("task=dec needs C >= 2, got {classes}"))),
        Task::Cer if classes != 0 => return Err(err(1, format!("task=cer needs C=0, got {classes}"))),
        _ => {}
    }

    let (_, names) = lines.next().ok_or_else(|| err(2, "missing column-name line".into()))?;
    let expected: Vec<String> = ["trial_id".to_string(), "y".to_string()]
        .into_iter()
        .chain((0..s_dim).map(|j| format!("xs_{j}")))
        .chain((0..t_dim).map(|j| format!("xt_{j}")))
        .collect();
    if names.split(',').map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(err(2, "column names do not match the header dimensions".into()));
    }

    let width = 2 + s_dim + t_dim;
    let mut samples = Vec::new();
    let mut seen_blocks = BTreeSet::new();
    let mut current: Option<u64> = None;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(err(lineno, format!("expected {width} cells, found {}", cells.len())));
        }
        let trial_id: u64 = cells[0]
            .parse()
            .map_err(|_| err(lineno, format!("trial_id `{}` is not an integer", cells[0])))?;
        if current != Some(trial_id) {
            if !seen_blocks.insert(trial_id) {
                return Err(err(
                    lineno,
                    format!("duplicate samples for trial {trial_id}: its block appears twice"),
                ));
            }
            current = Some(trial_id);
        }
        let label = match task {
            Task::Dec => {
                let c: usize = cells[1]
                    .parse()
                    .map_err(|_| err(lineno, format!("class label `{}` is not an integer", cells[1])))?;
                if c >= classes {
                    return Err(err(lineno, format!("class label {c} out of range for C={classes}")));
                }
                Label::Class(c)
            }
            Task::Cer => Label::Value(
                parse_cell(cells[1]).ok_or_else(|| err(lineno, format!("label `{}` is not a number", cells[1])))?,
            ),
        };
        let mut values = Vec::with_capacity(s_dim + t_dim);
        for (j, c) in cells[2..].iter().enumerate() {
            values.push(
                parse_cell(c).ok_or_else(|| err(lineno, format!("cell {} (`{c}`) is not a finite number", j + 2)))?,
            );
        }
        let x_t = values.split_off(s_dim);
        samples.push(PairedSample::new(trial_id, values, x_t, label));
    }
    Ok(Dataset {
        task,
        num_classes: classes,
        student_dim: s_dim,
        teacher_dim: t_dim,
        samples,
    })
}

fn parse_cell(c: &str) -> Option<f64> {
    c.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parameters of the synthetic paired-modality benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub task: Task,
    pub n_trials: usize,
    pub samples_per_trial: usize,
    pub latent_dim: usize,
    /// Classes for DEC; ignored for CER.
    pub num_classes: usize,
    pub student_dim: usize,
    pub teacher_dim: usize,
    /// DEC: probability of flipping to another class. CER: std of additive label noise.
    pub label_noise: f64,
    pub student_noise_scale: f64,
    pub teacher_noise_scale: f64,
    /// Std of the per-trial latent mean shift.
    pub trial_spread: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            task: Task::Dec,
            n_trials: 27,
            samples_per_trial: 40,
            latent_dim: 6,
            num_classes: 3,
            student_dim: 32,
            teacher_dim: 64,
            label_noise: 0.3,
            student_noise_scale: 1.5,
            teacher_noise_scale: 0.05,
            trial_spread: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise must lie in [0, 1], got {}",
                self.label_noise
            )));
        }
        if self.n_trials == 0
            || self.samples_per_trial == 0
            || self.latent_dim == 0
            || self.student_dim == 0
            || self.teacher_dim == 0
        {
            return Err(Error::Config("generator sizes must be >= 1".into()));
        }
        if self.task == Task::Dec && self.num_classes < 2 {
            return Err(Error::Config(format!(
                "DEC needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        for (name, v) in [
            ("student_noise_scale", self.student_noise_scale),
            ("teacher_noise_scale", self.teacher_noise_scale),
            ("trial_spread", self.trial_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            scale * x
        })
        .collect::<Vec<f64>>()
}

fn affine_tanh(a: &[f64], bias: &[f64], z: &[f64]) -> Vec<f64> {
    let l = z.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| (b + a[r * l..(r + 1) * l].iter().zip(z).map(|(w, x)| w * x).sum::<f64>()).tanh())
        .collect()
}

/// Draws a dataset. Latents carry a per-trial mean shift; the teacher view is
/// a smooth map of the latent with little noise, the student view a
/// different map with `student_noise_scale` Gaussian noise.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = crate::seeded_rng(spec.seed, 0);
    let l = spec.latent_dim;
    let gain = 1.0 / (l as f64).sqrt();
    let a_t = gaussian(&mut rng, spec.teacher_dim * l, 1.5 * gain);
    let b_t = gaussian(&mut rng, spec.teacher_dim, 0.3);
    let a_s = gaussian(&mut rng, spec.student_dim * l, 1.5 * gain);
    let b_s = gaussian(&mut rng, spec.student_dim, 0.3);
    let classes = match spec.task {
        Task::Dec => spec.num_classes,
        Task::Cer => 1,
    };
    let readout = gaussian(&mut rng, classes * l, 1.0);
    let readout_norm = readout.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut samples = Vec::with_capacity(spec.n_trials * spec.samples_per_trial);
    for trial in 0..spec.n_trials {
        let shift = gaussian(&mut rng, l, spec.trial_spread);
        for _ in 0..spec.samples_per_trial {
            let z: Vec<f64> = gaussian(&mut rng, l, 1.0)
                .iter()
                .zip(&shift)
                .map(|(a, b)| a + b)
                .collect();
            let mut x_t = affine_tanh(&a_t, &b_t, &z);
            for (v, n) in x_t
                .iter_mut()
                .zip(gaussian(&mut rng, spec.teacher_dim, spec.teacher_noise_scale))
            {
                *v += n;
            }
            let mut x_s = affine_tanh(&a_s, &b_s, &z);
            for (v, n) in x_s
                .iter_mut()
                .zip(gaussian(&mut rng, spec.student_dim, spec.student_noise_scale))
            {
                *v += n;
            }
            let (label, clean) = match spec.task {
                Task::Dec => {
                    let scores: Vec<f64> = (0..classes)
                        .map(|c| readout[c * l..(c + 1) * l].iter().zip(&z).map(|(w, x)| w * x).sum())
                        .collect();
                    let clean = argmax(&scores);
                    let flip_draw: f64 = rng.random();
                    let other = rng.random_range(0..classes - 1);
                    let observed = if flip_draw < spec.label_noise {
                        if other >= clean {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        clean
                    };
                    (Label::Class(observed), Label::Class(clean))
                }
                Task::Cer => {
                    let clean = readout.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>() / readout_norm;
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (Label::Value(clean + spec.label_noise * noise), Label::Value(clean))
                }
            };
            samples.push(PairedSample {
                trial_id: trial as u64,
                x_s,
                x_t,
                label,
                clean: Some(clean),
            });
        }
    }
    Ok(Dataset {
        task: spec.task,
        num_classes: if spec.task == Task::Dec { spec.num_classes } else { 0 },
        student_dim: spec.student_dim,
        teacher_dim: spec.teacher_dim,
        samples,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Assignment of whole trials to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<u64, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, trial: u64) -> Option<usize> {
        self.assignments.get(&trial).copied()
    }

    pub fn trials_in(&self, fold: usize) -> BTreeSet<u64> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (0..self.k)
            .map(|f| self.assignments.values().filter(|&&x| x == f).count())
            .collect()
    }

    /// `(train, validation)` sample indices for `fold`.
    pub fn split(&self, dataset: &Dataset, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..dataset.len()).partition(|&i| self.fold_of(dataset.samples[i].trial_id) != Some(fold))
    }
}

/// Shuffles trial ids with `seed` and deals them round-robin into `k` folds.
pub fn split_group_by_trial(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    let mut trials = dataset.trials();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if trials.len() < k {
        return Err(Error::Invalid(format!("{} trials cannot fill {k} folds", trials.len())));
    }
    let mut rng = crate::seeded_rng(seed, 1);
    trials.shuffle(&mut rng);
    let assignments = trials.into_iter().enumerate().map(|(i, t)| (t, i % k)).collect();
    Ok(FoldPlan { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task, noise: f64) -> GeneratorSpec {
        GeneratorSpec {
            task,
            n_trials: 4,
            samples_per_trial: 5,
            student_dim: 3,
            teacher_dim: 4,
            label_noise: noise,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn no_noise_means_clean_labels() {
        let d = generate(&small(Task::Dec, 0.0)).unwrap();
        assert!(d.samples.iter().all(|s| Some(s.label) == s.clean_label()));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small(Task::Cer, 0.3)).unwrap();
        let b = generate(&small(Task::Cer, 0.3)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        for task in [Task::Dec, Task::Cer] {
            let d = generate(&small(task, 0.2)).unwrap();
            let back = parse_dataset(&d.to_csv(), Path::new("mem")).unwrap();
            assert_eq!(back.samples.len(), d.samples.len());
            for (a, b) in back.samples.iter().zip(&d.samples) {
                assert_eq!(
                    (a.trial_id, &a.x_s, &a.x_t, a.label),
                    (b.trial_id, &b.x_s, &b.x_t, b.label)
                );
            }
        }
    }

    #[test]
    fn header_dimensions_are_honoured() {
        let mut text = String::from("#cmkd v1 task=dec S=8 T=16 C=2\ntrial_id,y");
        for j in 0..8 {
            text.push_str(&format!(",xs_{j}"));
        }
        for j in 0..16 {
            text.push_str(&format!(",xt_{j}"));
        }
        text.push('\n');
        for t in 0..3 {
            text.push_str(&format!("{t},{}", t % 2));
            for j in 0..24 {
                text.push_str(&format!(",{}", j as f64 * 0.5));
            }
            text.push('\n');
        }
        let d = parse_dataset(&text, Path::new("fixture.csv")).unwrap();
        assert_eq!((d.student_dim, d.teacher_dim, d.len()), (8, 16, 3));
        assert!(d.samples.iter().all(|s| s.x_s.len() == 8 && s.x_t.len() == 16));
    }

    #[test]
    fn short_row_names_its_line() {
        let d = generate(&small(Task::Dec, 0.0)).unwrap();
        let mut lines: Vec<String> = d.to_csv().lines().map(String::from).collect();
        let cut = lines[4].rfind(',').unwrap();
        lines[4].truncate(cut);
        let e = parse_dataset(&lines.join("\n"), Path::new("bad.csv")).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let p = Path::new("x");
        assert!(parse_dataset("", p).is_err());
        assert!(parse_dataset("#cmkd v2 task=dec S=1 T=1 C=2\n", p).is_err());
        assert!(parse_dataset("#cmkd v1 task=dec S=1 T=1\n", p).is_err());
        let ok_head = "#cmkd v1 task=dec S=1 T=1 C=2\ntrial_id,y,xs_0,xt_0\n";
        assert!(parse_dataset(&format!("{ok_head}0,1,abc,2\n"), p).is_err());
        assert!(parse_dataset(&format!("{ok_head}0,5,1,2\n"), p).is_err());
        assert!(parse_dataset(&format!("{ok_head}0,1,1,2\n1,1,1,2\n0,0,1,1\n"), p).is_err());
        assert!(parse_dataset(&format!("{ok_head}0,1,1,2\n0,0,1,1\n1,1,1,2\n"), p).is_ok());
        assert!(parse_dataset("#cmkd v1 task=dec S=1 T=1 C=2\ntrial_id,y,xs_0,xt_1\n", p).is_err());
    }

    #[test]
    fn fold_sizes_follow_pigeonhole() {
        let spec = GeneratorSpec {
            n_trials: 27,
            samples_per_trial: 2,
            ..small(Task::Dec, 0.0)
        };
        let d = generate(&spec).unwrap();
        let plan = split_group_by_trial(&d, 5, 3).unwrap();
        let mut sizes = plan.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![5, 5, 5, 6, 6]);
        let d5 = generate(&GeneratorSpec { n_trials: 5, ..spec }).unwrap();
        assert_eq!(split_group_by_trial(&d5, 5, 0).unwrap().fold_sizes(), vec![1; 5]);
        assert!(split_group_by_trial(&d5, 6, 0).is_err());
    }

    #[test]
    fn noise_outside_unit_interval_is_rejected() {
        assert!(generate(&small(Task::Dec, 1.5)).is_err());
    }
}
