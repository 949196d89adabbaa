//! Confusion counts and the P4 score.
//!
//! P4 = 4*tp*tn / (4*tp*tn + (tp+tn)*(fp+fn)), the harmonic mean of
//! precision, recall, specificity, and negative predictive value. It is
//! undefined when the denominator vanishes, which happens exactly when
//! tp*tn = 0 and (tp+tn)*(fp+fn) = 0.

use nalgebra::DVector;

use crate::objective::{sigmoid, Weights};
use crate::problem::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn new(true_pos: u64, true_neg: u64, false_pos: u64, false_neg: u64) -> Self {
        Self {
            true_pos,
            true_neg,
            false_pos,
            false_neg,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// None when the score is undefined (zero denominator).
    pub fn p4(&self) -> Option<f64> {
        let tp = self.true_pos as f64;
        let tn = self.true_neg as f64;
        let fp = self.false_pos as f64;
        let fn_ = self.false_neg as f64;
        let denom = 4.0 * tp * tn + (tp + tn) * (fp + fn_);
        if denom == 0.0 {
            None
        } else {
            Some(4.0 * tp * tn / denom)
        }
    }
}

/// Classifies every row of `data` with the sigmoid score at `w` and tallies
/// the outcomes against the labels. Scores at or above `threshold` predict
/// the positive class.
pub fn confusion(w: &Weights, data: &Dataset, threshold: f64) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for i in 0..data.len() {
        let x: DVector<f64> = data.features().row(i).transpose();
        let predicted_pos = sigmoid(w, &x) >= threshold;
        let actual_pos = data.labels()[i] == 1.0;
        match (predicted_pos, actual_pos) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, true) => counts.false_neg += 1,
            (false, false) => counts.true_neg += 1,
        }
    }
    counts
}

/// P4 of `w` on `data` at the given threshold; None when undefined.
pub fn p4_score(w: &Weights, data: &Dataset, threshold: f64) -> Option<f64> {
    confusion(w, data, threshold).p4()
}
