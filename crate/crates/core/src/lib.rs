//! Uncertainty-aware cross-modal knowledge distillation.
//!
//! A student network on a noisy modality learns from a frozen teacher on a
//! cleaner paired modality through four loss terms: InfoNCE alignment of the
//! two embedding spaces, an uncertainty term driven by Dirichlet evidence
//! from class prototypes, cross-head distillation (student features read by
//! the teacher's head from an intermediate layer), and the task loss
//! (cross-entropy or 1 − CCC).
//!
//! Everything runs on the small reverse-mode engine in [`tensor`].

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod instrument;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod prototypes;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`. Distinct streams give
/// independent sequences from one seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
