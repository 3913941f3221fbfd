//! Classification metrics, the repeated-split and heldout-ensemble
//! protocols, the fit-consumption audit and cohort histograms.

mod metrics;
mod protocol;

use std::collections::HashSet;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;

pub use metrics::{
    confusion_counts, confusion_metrics, stratified_quota, stratified_split, validation_size, ConfusionCounts, Metrics,
};
pub use protocol::{
    fit_classifier, heldout_ensemble_eval, majority_vote, repeated_split_cv, ClassifierConfig, CvReport, HeldoutReport,
    RepeatResult, RoundResult, Summary, TrainedClassifier,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("both classes must be present")]
    SingleClass,
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("leakage: {0}")]
    Leakage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub repeats: usize,
    pub validation_fraction: f64,
    pub heldout_size: usize,
    pub rounds: usize,
    pub ensemble_size: usize,
    /// Retrain the auto-encoder inside every CV repeat.
    pub strict_leakage: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 50,
            validation_fraction: 0.2,
            heldout_size: 20,
            rounds: 6,
            ensemble_size: 50,
            strict_leakage: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.repeats == 0 || self.rounds == 0 || self.ensemble_size == 0 {
            return Err(EvalError::InvalidConfig("repeats, rounds and ensemble_size must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(EvalError::InvalidConfig(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Which split a fit belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitContext {
    /// Shared by every split of a protocol run.
    Shared,
    CvRepeat(usize),
    HeldoutRound(usize),
    HeldoutMember { round: usize, member: usize },
}

impl fmt::Display for FitContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitContext::Shared => write!(f, "shared"),
            FitContext::CvRepeat(r) => write!(f, "cv{r}"),
            FitContext::HeldoutRound(r) => write!(f, "heldout{r}"),
            FitContext::HeldoutMember { round, member } => write!(f, "heldout{round}/member{member}"),
        }
    }
}

/// One fit call and the subject ids it consumed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FitRecord {
    pub context: FitContext,
    pub stage: String,
    pub ids: Vec<String>,
}

/// Thread-safe log of fit calls.
#[derive(Debug, Default)]
pub struct FitLog {
    records: Mutex<Vec<FitRecord>>,
}

impl FitLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, context: FitContext, stage: impl Into<String>, ids: impl IntoIterator<Item = String>) {
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.sort();
        self.records.lock().expect("fit log poisoned").push(FitRecord {
            context,
            stage: stage.into(),
            ids,
        });
    }

    /// All records in a stable order.
    pub fn records(&self) -> Vec<FitRecord> {
        let mut r = self.records.lock().expect("fit log poisoned").clone();
        r.sort();
        r
    }
}

/// Validation ids of one CV repeat that appear in a fit call used by that
/// repeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageViolation {
    pub repeat: usize,
    pub context: FitContext,
    pub stage: String,
    pub ids: Vec<String>,
}

/// Checks every fit of a CV run against the validation ids of the repeat
/// it served. Shared fits serve every repeat.
pub fn audit_cv(records: &[FitRecord], report: &CvReport) -> Vec<LeakageViolation> {
    let mut out = Vec::new();
    for rep in &report.repeats {
        let val: HashSet<&str> = rep.validation_ids.iter().map(String::as_str).collect();
        for rec in records {
            let applies = match rec.context {
                FitContext::Shared => true,
                FitContext::CvRepeat(r) => r == rep.repeat,
                _ => false,
            };
            if !applies {
                continue;
            }
            let leaked: Vec<String> = rec.ids.iter().filter(|id| val.contains(id.as_str())).cloned().collect();
            if !leaked.is_empty() {
                out.push(LeakageViolation {
                    repeat: rep.repeat,
                    context: rec.context,
                    stage: rec.stage.clone(),
                    ids: leaked,
                });
            }
        }
    }
    out
}

/// Produces a subject-level feature matrix with every learned component
/// fit on the `train` rows only.
pub trait Featurizer: Sync {
    /// Features for every subject of the dataset, in dataset order.
    fn fit_features(&self, train: &[usize], context: FitContext, log: &FitLog, seed: u64) -> crate::Result<FeatureMatrix>;

    /// Subject ids and labels in dataset order.
    fn subjects(&self) -> (&[String], &[crate::dataio::Label]);
}

/// Class-mean feature vectors over imaging columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortHistograms {
    pub names: Vec<String>,
    pub mean_positive: Vec<f64>,
    pub mean_negative: Vec<f64>,
    /// `mean_positive - mean_negative`
    pub difference: Vec<f64>,
}

pub fn cohort_histograms(features: &FeatureMatrix) -> Result<CohortHistograms, EvalError> {
    class_means(features, &features.imaging_columns())
}

/// Class means over the given columns.
pub fn class_means(features: &FeatureMatrix, columns: &[usize]) -> Result<CohortHistograms, EvalError> {
    let pos: Vec<usize> = (0..features.n_rows()).filter(|&i| features.labels[i].is_positive()).collect();
    let neg: Vec<usize> = (0..features.n_rows()).filter(|&i| !features.labels[i].is_positive()).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass);
    }
    let mean = |rows: &[usize], j: usize| rows.iter().map(|&i| features.values[[i, j]]).sum::<f64>() / rows.len() as f64;
    let mean_positive: Vec<f64> = columns.iter().map(|&j| mean(&pos, j)).collect();
    let mean_negative: Vec<f64> = columns.iter().map(|&j| mean(&neg, j)).collect();
    Ok(CohortHistograms {
        names: columns.iter().map(|&j| features.names[j].clone()).collect(),
        difference: mean_positive.iter().zip(&mean_negative).map(|(a, b)| a - b).collect(),
        mean_positive,
        mean_negative,
    })
}

impl CohortHistograms {
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> crate::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["feature", "mean_positive", "mean_negative", "difference"])?;
        for i in 0..self.names.len() {
            w.write_record([
                self.names[i].clone(),
                format!("{:?}", self.mean_positive[i]),
                format!("{:?}", self.mean_negative[i]),
                format!("{:?}", self.difference[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Label;
    use ndarray::array;

    #[test]
    fn cohort_means_of_single_subjects() {
        let m = FeatureMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["cc/FA/bin00".into(), "cc/FA/bin01".into(), "demo/age".into()],
            vec![Label::Patient, Label::Control],
            array![[0.25, 0.75, 30.0], [0.5, 0.5, 40.0]],
        )
        .unwrap();
        let c = cohort_histograms(&m).unwrap();
        assert_eq!(c.names.len(), 2);
        assert_eq!(c.mean_positive, vec![0.25, 0.75]);
        assert_eq!(c.mean_negative, vec![0.5, 0.5]);
        assert_eq!(c.difference, vec![-0.25, 0.25]);
        let single = m.select_rows(&[0]);
        assert!(matches!(cohort_histograms(&single), Err(EvalError::SingleClass)));
    }

    #[test]
    fn log_is_sorted_and_audit_finds_leaks() {
        let log = FitLog::new();
        log.record(FitContext::CvRepeat(1), "svm", vec!["S2".to_string(), "S1".to_string()]);
        log.record(FitContext::Shared, "cae", vec!["S9".to_string()]);
        let recs = log.records();
        assert_eq!(recs[0].context, FitContext::Shared);
        assert_eq!(recs[1].ids, vec!["S1", "S2"]);
        let report = CvReport::for_audit(vec![(1, vec!["S2".into()]), (2, vec!["S9".into()])]);
        let v = audit_cv(&recs, &report);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].ids, vec!["S2"]);
        assert_eq!(v[1].context, FitContext::Shared);
    }
}
