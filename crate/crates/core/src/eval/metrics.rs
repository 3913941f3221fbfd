use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dataio::Label;
use crate::seed;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, predicted: Label, actual: Label) {
        match (predicted.is_positive(), actual.is_positive()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    /// Rates; a zero denominator gives `None`.
    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            specificity: ratio(self.tn, self.tn + self.fp),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn confusion_counts(predictions: &[Label], labels: &[Label]) -> Result<ConfusionCounts, EvalError> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &a) in predictions.iter().zip(labels) {
        c.add(p, a);
    }
    Ok(c)
}

/// Accuracy, sensitivity and specificity with patients as positives.
pub fn confusion_metrics(predictions: &[Label], labels: &[Label]) -> Result<Metrics, EvalError> {
    confusion_counts(predictions, labels).map(|c| c.metrics())
}

/// Per-class sample counts for a subset of `size` drawn from classes of
/// the given sizes: floors of the proportional quotas, remainder to the
/// largest fractional parts (ties to the positive class).
pub fn stratified_quota(n_pos: usize, n_neg: usize, size: usize) -> (usize, usize) {
    let n = (n_pos + n_neg) as f64;
    let qp = n_pos as f64 * size as f64 / n;
    let qn = n_neg as f64 * size as f64 / n;
    let (mut p, mut q) = (qp.floor() as usize, qn.floor() as usize);
    while p + q < size {
        if (qp - p as f64 >= qn - q as f64 && p < n_pos) || q >= n_neg {
            p += 1;
        } else {
            q += 1;
        }
    }
    (p.min(n_pos), q.min(n_neg))
}

/// Splits indices into `(rest, held)` with `held` of the given size drawn
/// per class. Both lists are sorted.
pub fn stratified_split(labels: &[Label], held_size: usize, seed_value: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_positive()).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass);
    }
    if held_size == 0 || held_size >= labels.len() {
        return Err(EvalError::TooFewSamples(format!(
            "cannot hold out {held_size} of {} samples",
            labels.len()
        )));
    }
    let (hp, hn) = stratified_quota(pos.len(), neg.len(), held_size);
    let mut rng = seed::rng(seed_value);
    let mut held = Vec::with_capacity(held_size);
    for (mut class, take) in [(pos, hp), (neg, hn)] {
        class.shuffle(&mut rng);
        held.extend_from_slice(&class[..take]);
    }
    held.sort_unstable();
    let rest = (0..labels.len()).filter(|i| held.binary_search(i).is_err()).collect();
    Ok((rest, held))
}

/// Validation size for a fraction: `ceil(n * fraction)`.
pub fn validation_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction) - 1e-9).ceil() as usize
}
