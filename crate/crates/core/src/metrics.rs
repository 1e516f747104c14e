//! Evaluation metrics for both tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::loss_ccc;
use crate::tensor::{Tape, Tensor};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!(
            "length mismatch: {a} predictions vs {b} targets"
        )));
    }
    if a == 0 {
        return Err(Error::Invalid("metrics need at least one sample".into()));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1. A class absent from both predictions and
/// truth is left out of the mean; any other class with no true positives
/// scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Invalid(format!(
            "class {bad} out of range for {classes} classes"
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fnn = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&k| tp[k] + fp[k] + fnn[k] > 0)
        .map(|k| 2.0 * tp[k] as f64 / (2 * tp[k] + fp[k] + fnn[k]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if pred.len() < 2 {
        return Err(Error::Invalid("PCC needs at least two samples".into()));
    }
    let (mp, mt) = (mean(pred), mean(truth));
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::Invalid("PCC is undefined for a constant series".into()));
    }
    Ok(cov / (vp.sqrt() * vt.sqrt()))
}

/// Raw concordance correlation, computed through the same graph as the
/// `1 − CCC` training loss.
pub fn ccc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let mut tape = Tape::new();
    let p = tape.constant(&Tensor::column(pred)?);
    let loss = loss_ccc(&mut tape, p, truth)?;
    Ok(1.0 - tape.item(loss))
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    // shifted by the first value so identical inputs give an exact mean
    let pivot = values[0];
    let m = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / values.len() as f64;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    };
    MeanStd { mean: m, std }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|i| crate::data::argmax(logits.row(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1];
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(macro_f1(&y, &y, 3).unwrap(), 1.0);
        let v = [0.5, -1.0, 2.0];
        assert_eq!(rmse(&v, &v).unwrap(), 0.0);
        assert!((pcc(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((ccc(&v, &v).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_predictions_on_balanced_binary() {
        let truth = [0, 1, 0, 1, 0, 1];
        let pred = [0; 6];
        assert_eq!(accuracy(&pred, &truth).unwrap(), 0.5);
        assert!((macro_f1(&pred, &truth, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        // class 2 never appears anywhere
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn doubled_zero_mean_series() {
        let y = [-1.5, -0.5, 0.5, 1.5];
        let p: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        assert!((pcc(&p, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!((ccc(&p, &y).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn metric_errors() {
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(pcc(&[1.0, 1.0], &[0.0, 2.0]).is_err());
        assert!(ccc(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(macro_f1(&[3], &[0], 2).is_err());
    }

    #[test]
    fn sample_std() {
        let s = mean_std(&[0.5, 0.5, 0.5]);
        assert_eq!((s.mean, s.std), (0.5, 0.0));
        let s = mean_std(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 2f64.sqrt()));
    }
}
