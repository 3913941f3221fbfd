//! RBF-SVM training and model selection.

mod qp;
mod select;
mod svm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use qp::{qp_oracle, qp_oracle_kernel, OracleSolution};
pub use select::{
    correlation_rank, cv_accuracy, forward_select, grid_search, stratified_folds, GridResult, SelectionConfig,
    SelectionResult, SvmGrid,
};
pub use svm::{
    dual_objective, kernel_from_sq_dists, kkt_violations, rbf_kernel, solve_dual, sq_dists, svm_predict, svm_train,
    DualSolution, SmoConfig, SvmModel,
};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("training data has a single class")]
    SingleClass,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("solver stopped after {iterations} iterations without meeting the tolerance")]
    NoConvergence { iterations: usize },
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("selection budget {budget} exceeds the {features} available features")]
    BudgetExceedsFeatures { budget: usize, features: usize },
    #[error("too few samples: {0}")]
    TooFewSamples(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    #[serde(rename = "C")]
    pub c: f64,
    pub gamma: f64,
}

impl SvmParams {
    pub fn new(c: f64, gamma: f64) -> Result<Self, LearnError> {
        let p = Self { c, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.c.is_finite() && self.c > 0.0 && self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(LearnError::InvalidParams(format!(
                "C = {} and gamma = {} must be positive and finite",
                self.c, self.gamma
            )));
        }
        Ok(())
    }
}

/// +1 / -1 labels must both be present.
pub(crate) fn check_two_classes(y: &[f64]) -> Result<(), LearnError> {
    if !(y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0)) {
        return Err(LearnError::SingleClass);
    }
    Ok(())
}
