use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_au_f1: Vec<f64>,
    pub avg_f1: f64,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

impl Metrics {
    /// Thresholded predictions against binary labels, rows of length N.
    pub fn from_predictions(probs: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<Self> {
        let n = labels.first().map_or(0, Vec::len);
        if probs.len() != labels.len() || n == 0 {
            return Err(Error::Data("predictions and labels must be nonempty and aligned".into()));
        }
        let (mut tp, mut fp, mut fn_) = (vec![0u64; n], vec![0u64; n], vec![0u64; n]);
        for (p, y) in probs.iter().zip(labels) {
            if p.len() != n || y.len() != n {
                return Err(Error::Data("ragged prediction rows".into()));
            }
            for i in 0..n {
                match (p[i] >= threshold, y[i] == 1) {
                    (true, true) => tp[i] += 1,
                    (true, false) => fp[i] += 1,
                    (false, true) => fn_[i] += 1,
                    (false, false) => {}
                }
            }
        }
        let per_au_f1: Vec<f64> = (0..n).map(|i| f1_from_counts(tp[i], fp[i], fn_[i])).collect();
        let avg_f1 = per_au_f1.iter().sum::<f64>() / n as f64;
        Ok(Self { per_au_f1, avg_f1, tp, fp, fn_ })
    }
}
