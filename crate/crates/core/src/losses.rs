//! Alignment, distillation and task losses, each a differentiable scalar on
//! a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Discrete emotion classification.
    Dec,
    /// Continuous emotion regression.
    Cer,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Dec => "dec",
            Task::Cer => "cer",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dec" => Ok(Task::Dec),
            "cer" => Ok(Task::Cer),
            other => Err(format!("unknown task `{other}` (expected dec or cer)")),
        }
    }
}

/// Temperatures and scale shared by the alignment terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Cosine-similarity temperature, used for both batch and prototype similarity.
    pub beta: f64,
    /// Evidence temperature.
    pub tau: f64,
    /// Scale of the similarity-derived uncertainty target.
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            tau: 1.0,
            delta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("tau", self.tau), ("delta", self.delta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("loss.{name} must be a positive number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Weights of the similarity, uncertainty, distillation and task terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub sim: f64,
    pub unc: f64,
    pub kd: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossWeights {
    pub const ALL: LossWeights = LossWeights {
        sim: 1.0,
        unc: 1.0,
        kd: 1.0,
        task: 1.0,
    };
    pub const TASK_ONLY: LossWeights = LossWeights {
        sim: 0.0,
        unc: 0.0,
        kd: 0.0,
        task: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.sim, self.unc, self.kd, self.task];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// Whether batch similarity `Q` is needed this step.
    pub fn needs_similarity(&self) -> bool {
        self.sim > 0.0 || self.unc > 0.0
    }
}

/// The four loss terms of one step; absent terms were not built.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub sim: Option<Var>,
    pub unc: Option<Var>,
    pub kd: Option<Var>,
    pub task: Option<Var>,
}

/// `Q_ij = β · cos(a_i, b_j)`, shape `N × M`.
pub fn similarity_matrix(tape: &mut Tape, a: Var, b: Var, beta: f64) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_matrix",
            left: sa,
            right: sb,
        }
        .into());
    }
    instrument::similarity();
    let na = tape.row_l2_normalize(a)?;
    let nb = tape.row_l2_normalize(b)?;
    let nbt = tape.transpose(nb)?;
    let cos = tape.matmul(na, nbt)?;
    Ok(tape.scale(cos, beta)?)
}

/// InfoNCE over a precomputed student-by-teacher similarity matrix.
pub fn info_nce(tape: &mut Tape, q: Var) -> Result<Var> {
    let shape = tape.shape(q);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "info_nce",
            left: shape.to_vec(),
            right: vec![],
        }
        .into());
    }
    if shape[0] == 0 {
        return Err(Error::Invalid("similarity loss needs a non-empty batch".into()));
    }
    let ls = tape.log_softmax_rows(q)?;
    let diag = tape.gather_diagonal(ls)?;
    let m = tape.mean(diag)?;
    Ok(tape.neg(m)?)
}

/// One-directional InfoNCE: student rows against teacher columns.
pub fn loss_sim(tape: &mut Tape, e_s: Var, e_t: Var, beta: f64) -> Result<Var> {
    let (ss, st) = (tape.shape(e_s).to_vec(), tape.shape(e_t).to_vec());
    if ss != st {
        return Err(TensorError::ShapeMismatch {
            op: "loss_sim",
            left: ss,
            right: st,
        }
        .into());
    }
    if ss.first() == Some(&0) {
        return Err(Error::Invalid("similarity loss needs a non-empty batch".into()));
    }
    let q = similarity_matrix(tape, e_s, e_t, beta)?;
    info_nce(tape, q)
}

/// DEC: batch-mean `KL(softmax(ŷ_t) ‖ softmax(ŷ_{t|s}))` with the teacher
/// side detached. CER: mean squared error between the two outputs.
pub fn loss_kd(tape: &mut Tape, y_t: Var, y_ts: Var, task: Task) -> Result<Var> {
    let (st, sts) = (tape.shape(y_t).to_vec(), tape.shape(y_ts).to_vec());
    if st != sts || st.len() != 2 || st[0] == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "loss_kd",
            left: st,
            right: sts,
        }
        .into());
    }
    let (n, c) = (st[0], st[1]);
    let teacher = tape.detach(y_t)?;
    match task {
        Task::Dec => {
            let t_vals = tape.value(teacher).to_vec();
            let p = crate::tensor::softmax_rows_raw(&t_vals, n, c);
            let log_p = crate::tensor::log_softmax_rows_raw(&t_vals, n, c);
            let p_log_p: f64 = p.iter().zip(&log_p).map(|(a, b)| a * b).sum();
            let p = tape.constant(&Tensor::matrix(n, c, p)?);
            let log_q = tape.log_softmax_rows(y_ts)?;
            let cross = tape.mul(p, log_q)?;
            let cross = tape.sum(cross)?;
            // (Σ p log p − Σ p log q) / N
            let neg = tape.neg(cross)?;
            let kl = tape.add_scalar(neg, p_log_p)?;
            Ok(tape.scale(kl, 1.0 / n as f64)?)
        }
        Task::Cer => {
            let d = tape.sub(teacher, y_ts)?;
            let sq = tape.square(d)?;
            Ok(tape.mean(sq)?)
        }
    }
}

/// Batch-mean cross-entropy of logits against class indices.
pub fn loss_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "loss_ce",
            left: shape,
            right: vec![labels.len()],
        }
        .into());
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    let ls = tape.log_softmax_rows(logits)?;
    let picked = tape.gather_cols(ls, labels)?;
    let m = tape.mean(picked)?;
    Ok(tape.neg(m)?)
}

/// `1 − CCC(ŷ, y)` with population statistics; `y` is a constant.
pub fn loss_ccc(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let n = target.len();
    if shape != [n, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "loss_ccc",
            left: shape,
            right: vec![n, 1],
        }
        .into());
    }
    if n < 2 {
        return Err(Error::Invalid("CCC needs at least two samples".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(tape.value(pred)) && constant(target) {
        return Err(Error::Invalid("CCC is undefined for two constant series".into()));
    }
    let y = tape.constant(&Tensor::column(target)?);
    let mp = tape.mean(pred)?;
    let my = tape.mean(y)?;
    let dp = tape.sub(pred, mp)?;
    let dy = tape.sub(y, my)?;
    let prod = tape.mul(dp, dy)?;
    let cov = tape.mean(prod)?;
    let dp2 = tape.square(dp)?;
    let var_p = tape.mean(dp2)?;
    let dy2 = tape.square(dy)?;
    let var_y = tape.mean(dy2)?;
    let dm = tape.sub(mp, my)?;
    let dm2 = tape.square(dm)?;
    let denom = tape.add(var_p, var_y)?;
    let denom = tape.add(denom, dm2)?;
    let num = tape.scale(cov, 2.0)?;
    let ccc = tape.div(num, denom)?;
    let neg = tape.neg(ccc)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Weighted sum of the parts whose weight is positive. A positive weight
/// with a missing part is an error.
pub fn loss_total(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    let terms = [
        ("sim", weights.sim, parts.sim),
        ("unc", weights.unc, parts.unc),
        ("kd", weights.kd, parts.kd),
        ("task", weights.task, parts.task),
    ];
    let mut total: Option<Var> = None;
    for (name, w, part) in terms {
        if w == 0.0 {
            continue;
        }
        let part =
            part.ok_or_else(|| Error::Invalid(format!("loss term `{name}` has weight {w} but was not built")))?;
        let weighted = if w == 1.0 { part } else { tape.scale(part, w)? };
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    total.ok_or_else(|| Error::Config("all loss weights are zero".into()))
}
