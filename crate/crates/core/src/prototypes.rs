//! Class prototypes, Dirichlet evidence and the uncertainty-alignment loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::losses::similarity_matrix;
use crate::tensor::{Tape, Tensor, TensorError, Var, STABILITY_FLOOR};

/// Ceiling on `Q/τ` before exponentiation.
pub const EVIDENCE_EXP_CLAMP: f64 = 60.0;

/// Floor on `Q/τ`: below it `exp(x) + 1` rounds to exactly 1 in f64, which
/// would break `α > 1`. The value changes by less than 2.4e-16.
pub const EVIDENCE_EXP_FLOOR: f64 = -36.0;

/// Largest f64 below 1. The exact uncertainty is strictly below 1.
pub const UNCERTAINTY_CEILING: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeSource {
    Learned,
    ClassMeanInit,
}

/// How total evidence maps to uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyForm {
    /// `u = 1 − c / Σα`, increasing in evidence.
    #[default]
    AsPrinted,
    /// `u = c / Σα`, decreasing in evidence.
    Inverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `c × embed_dim`, trainable.
    pub phi: Tensor,
    pub source: PrototypeSource,
}

impl PrototypeBank {
    pub fn new(phi: Tensor, source: PrototypeSource) -> Result<Self> {
        if phi.shape().len() != 2 || phi.rows() < 2 {
            return Err(Error::Invalid(format!(
                "prototype bank needs at least 2 rows, got shape {:?}",
                phi.shape()
            )));
        }
        for j in 0..phi.rows() {
            let norm = phi.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= STABILITY_FLOOR {
                return Err(Error::Invalid(format!("prototype {j} has degenerate norm {norm}")));
            }
        }
        Ok(Self {
            phi: phi.with_requires_grad(true),
            source,
        })
    }

    pub fn count(&self) -> usize {
        self.phi.rows()
    }
}

/// Row `j` of Φ is the L2-normalized mean of the embeddings labelled `j`.
pub fn init_prototypes(teacher_embeddings: &Tensor, labels: &[usize], c: usize) -> Result<PrototypeBank> {
    let n = teacher_embeddings.rows();
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} embeddings", labels.len())));
    }
    let d = teacher_embeddings.cols();
    let mut sums = vec![0.0; c * d];
    let mut counts = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Invalid(format!("label {y} out of range for {c} prototypes")));
        }
        counts[y] += 1;
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(teacher_embeddings.row(i)) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Invalid(format!(
            "class/bin {empty} has no samples to build a prototype from"
        )));
    }
    for j in 0..c {
        let row = &mut sums[j * d..(j + 1) * d];
        for v in row.iter_mut() {
            *v /= counts[j] as f64;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(STABILITY_FLOOR);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    PrototypeBank::new(Tensor::matrix(c, d, sums)?, PrototypeSource::ClassMeanInit)
}

/// Equal-width bins over `[min, max]` of continuous labels.
pub fn bin_labels(values: &[f64], c: usize) -> Result<Vec<usize>> {
    if c < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {c}")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi <= lo {
        return Err(Error::Invalid("cannot bin an empty or constant label series".into()));
    }
    let width = (hi - lo) / c as f64;
    Ok(values
        .iter()
        .map(|&v| (((v - lo) / width) as usize).min(c - 1))
        .collect())
}

/// `α_ij = exp(clamp(Q_ij(e, Φ)/τ, -36, 60)) + 1`, shape `N × c`.
pub fn dirichlet_alpha(tape: &mut Tape, e: Var, phi: Var, beta: f64, tau: f64) -> Result<Var> {
    instrument::prototype();
    let q = similarity_matrix(tape, e, phi, beta)?;
    let scaled = tape.scale(q, 1.0 / tau)?;
    let clamped = tape.clamp(scaled, EVIDENCE_EXP_FLOOR, EVIDENCE_EXP_CLAMP)?;
    let ev = tape.exp(clamped)?;
    Ok(tape.add_scalar(ev, 1.0)?)
}

/// Per-sample uncertainty from Dirichlet evidence, shape `N × 1`.
pub fn uncertainty(tape: &mut Tape, alpha: Var, form: UncertaintyForm) -> Result<Var> {
    let shape = tape.shape(alpha).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::NotMatrix {
            op: "uncertainty",
            shape,
        }
        .into());
    }
    let c = tape.scalar(shape[1] as f64)?;
    let total = tape.sum_axis(alpha, 1)?;
    let ratio = tape.div(c, total)?;
    Ok(match form {
        UncertaintyForm::AsPrinted => {
            let neg = tape.neg(ratio)?;
            let u = tape.add_scalar(neg, 1.0)?;
            // near the evidence ceiling 1 − c/Σα is within an ulp of 1 and
            // would round up to it
            tape.clamp_max(u, UNCERTAINTY_CEILING)?
        }
        UncertaintyForm::Inverse => ratio,
    })
}

/// `(1/N) Σ_j (u_j − δ h_j)²` where `h_j` is the mean off-diagonal entry of
/// row `j` of the batch similarity matrix.
pub fn loss_unc(tape: &mut Tape, u: Var, q_batch: Var, delta: f64) -> Result<Var> {
    let qs = tape.shape(q_batch).to_vec();
    let n = qs.first().copied().unwrap_or(0);
    if qs.len() != 2 || qs[1] != n {
        return Err(TensorError::ShapeMismatch {
            op: "loss_unc",
            left: qs,
            right: vec![],
        }
        .into());
    }
    if tape.shape(u) != [n, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "loss_unc",
            left: tape.shape(u).to_vec(),
            right: vec![n, 1],
        }
        .into());
    }
    if n < 2 {
        return Err(Error::Invalid("uncertainty loss needs at least two samples".into()));
    }
    let rows = tape.sum_axis(q_batch, 1)?;
    let diag = tape.gather_diagonal(q_batch)?;
    let off = tape.sub(rows, diag)?;
    let target = tape.scale(off, delta / (n - 1) as f64)?;
    let r = tape.sub(u, target)?;
    let sq = tape.square(r)?;
    Ok(tape.mean(sq)?)
}
