//! Browser demo: three small views onto the cmkd losses, exported with
//! wasm-bindgen. Every export takes plain numbers and returns plain numbers
//! or a JSON string so the page needs no bundler.

use cmkd::data::{generate, GeneratorSpec};
use cmkd::losses::{info_nce, similarity_matrix, LossWeights};
use cmkd::metrics::argmax_rows;
use cmkd::prototypes::{dirichlet_alpha, uncertainty, UncertaintyForm};
use cmkd::tensor::{Tape, Tensor};
use cmkd::training::{run_cv, ExperimentConfig};
use rand::Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Half-width of the embedding plane shown by the heatmap.
pub const EXTENT: f64 = 1.5;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Three unit prototypes at 0°, 120° and 240° in the plane.
pub fn plane_prototypes() -> Tensor {
    let rows: Vec<[f64; 2]> = (0..3)
        .map(|k| {
            let a = k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            [a.cos(), a.sin()]
        })
        .collect();
    Tensor::from_rows(&rows).expect("static shape")
}

/// Row-major `size × size` grid of uncertainty over `[-EXTENT, EXTENT]²`,
/// top row first.
pub fn uncertainty_field(beta: f64, tau: f64, inverse: bool, size: usize) -> cmkd::Result<Vec<f64>> {
    let size = size.clamp(2, 256);
    let step = 2.0 * EXTENT / (size - 1) as f64;
    let mut points = Vec::with_capacity(size * size * 2);
    for r in 0..size {
        for c in 0..size {
            // the exact origin has no direction; nudge it
            let x = -EXTENT + c as f64 * step + 1e-9;
            let y = EXTENT - r as f64 * step;
            points.extend([x, y]);
        }
    }
    let mut tape = Tape::new();
    let e = tape.constant(&Tensor::matrix(size * size, 2, points)?);
    let phi = tape.constant(&plane_prototypes());
    let alpha = dirichlet_alpha(&mut tape, e, phi, beta, tau)?;
    let form = if inverse {
        UncertaintyForm::Inverse
    } else {
        UncertaintyForm::AsPrinted
    };
    let u = uncertainty(&mut tape, alpha, form)?;
    Ok(tape.value(u).to_vec())
}

#[wasm_bindgen]
pub fn uncertainty_heatmap(beta: f64, tau: f64, inverse: bool, size: usize) -> Result<Vec<f64>, JsError> {
    uncertainty_field(beta, tau, inverse, size).map_err(js_err)
}

/// Random teacher embeddings and noisy student copies: the similarity
/// matrix and its InfoNCE loss.
pub fn similarity_case(n: usize, dim: usize, noise: f64, beta: f64, seed: u64) -> cmkd::Result<serde_json::Value> {
    let (n, dim) = (n.clamp(2, 32), dim.clamp(2, 64));
    let mut rng = cmkd::seeded_rng(seed, 0);
    let teacher: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let student: Vec<f64> = teacher
        .iter()
        .map(|t| t + noise * rng.random_range(-1.0..1.0))
        .collect();
    let mut tape = Tape::new();
    let s = tape.constant(&Tensor::matrix(n, dim, student)?);
    let t = tape.constant(&Tensor::matrix(n, dim, teacher)?);
    let q = similarity_matrix(&mut tape, s, t, beta)?;
    let loss = info_nce(&mut tape, q)?;
    let best = argmax_rows(&Tensor::matrix(n, n, tape.value(q).to_vec())?);
    let matched = best.iter().enumerate().filter(|(i, j)| i == *j).count();
    Ok(json!({
        "n": n,
        "q": tape.value(q),
        "loss": tape.item(loss),
        "chance_loss": (n as f64).ln(),
        "matched": matched,
    }))
}

#[wasm_bindgen]
pub fn similarity_demo(n: usize, dim: usize, noise: f64, beta: f64, seed: u64) -> Result<String, JsError> {
    similarity_case(n, dim, noise, beta, seed)
        .map(|v| v.to_string())
        .map_err(js_err)
}

/// Cross-validates a student on a small generated set and returns the
/// per-epoch trace of fold 0 plus the aggregate metrics.
pub fn training_case(weights: LossWeights, epochs: usize, seed: u64) -> cmkd::Result<serde_json::Value> {
    let ds = generate(&GeneratorSpec {
        n_trials: 9,
        samples_per_trial: 20,
        seed,
        ..Default::default()
    })?;
    let mut cfg = ExperimentConfig {
        weights,
        ..Default::default()
    };
    cfg.train.epochs = epochs.clamp(1, 200);
    cfg.train.patience = cfg.train.patience.min(cfg.train.epochs);
    cfg.train.teacher_epochs = 40;
    cfg.train.folds = 3;
    cfg.train.seed = seed;
    // no threads in the browser
    cfg.train.workers = 1;
    let out = run_cv(&ds, &cfg)?;
    let fold = &out.report.folds[0];
    let agg = |k: &str| out.report.aggregate.get(k).map(|m| m.mean);
    Ok(json!({
        "train_total": fold.trace.iter().map(|r| r.train.total).collect::<Vec<_>>(),
        "val_task": fold.trace.iter().map(|r| r.val_task_loss).collect::<Vec<_>>(),
        "best_epoch": fold.best_epoch,
        "accuracy": agg("accuracy"),
        "clean_accuracy": agg("clean_accuracy"),
        "mask": out.report.mask.label(),
    }))
}

#[wasm_bindgen]
pub fn training_trace(sim: f64, unc: f64, kd: f64, epochs: usize, seed: u64) -> Result<String, JsError> {
    let weights = LossWeights {
        sim,
        unc,
        kd,
        task: 1.0,
    };
    training_case(weights, epochs, seed)
        .map(|v| v.to_string())
        .map_err(js_err)
}
