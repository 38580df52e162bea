use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};
use crate::trace::Label;

/// Confusion counts with malicious as the positive class. Ratios with a zero
/// denominator are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn compute_metrics(predictions: &[Label], truth: &[Label]) -> Result<Metrics> {
    if predictions.len() != truth.len() {
        return Err(PulseError::Contract(format!(
            "{} predictions for {} truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, t) in predictions.iter().zip(truth) {
        match (p, t) {
            (Label::Malicious, Label::Malicious) => tp += 1,
            (Label::Malicious, Label::Benign) => fp += 1,
            (Label::Benign, Label::Malicious) => fn_ += 1,
            (Label::Benign, Label::Benign) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}
