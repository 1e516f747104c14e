use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// Half-cosine from start to end.
    #[default]
    Cosine,
    /// Geometric interpolation from start to end.
    Exponential,
    /// Always the start rate.
    Constant,
}

impl LrSchedule {
    /// Learning rate for `epoch` in `0..=epochs`; exact at both endpoints.
    pub fn rate(self, epoch: usize, epochs: usize, start: f64, end: f64) -> f64 {
        if epochs == 0 || epoch == 0 {
            return start;
        }
        if epoch >= epochs {
            return match self {
                LrSchedule::Constant => start,
                _ => end,
            };
        }
        let t = epoch as f64 / epochs as f64;
        match self {
            LrSchedule::Cosine => end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos()),
            LrSchedule::Exponential => start * (end / start).powf(t),
            LrSchedule::Constant => start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Patience-based early stopping on a lower-is-better score.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_improvement: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        if self.best.is_none_or(|b| score < b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.since_improvement = 0;
            return StopDecision::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Wait
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since_improvement
    }
}
