use std::io;

use thiserror::Error;

use crate::cae::CaeError;
use crate::dataio::DataError;
use crate::eval::EvalError;
use crate::features::FeatureError;
use crate::learn::LearnError;
use crate::patchex::PatchError;
use crate::vocab::VocabError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Cae(#[from] CaeError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) | Error::Csv(_) => ErrorKind::Io,
            Error::Json(_) => ErrorKind::Data,
            Error::Data(DataError::Io(_)) => ErrorKind::Io,
            Error::Data(DataError::InvalidSpec(_)) => ErrorKind::Config,
            Error::Cae(CaeError::InvalidArch(_)) | Error::Cae(CaeError::InvalidConfig(_)) => {
                ErrorKind::Config
            }
            Error::Cae(CaeError::NonFinite) => ErrorKind::Numeric,
            Error::Learn(LearnError::NoConvergence { .. }) => ErrorKind::Numeric,
            Error::Learn(LearnError::EmptyGrid) | Error::Learn(LearnError::InvalidParams(_)) => {
                ErrorKind::Config
            }
            Error::Learn(LearnError::BudgetExceedsFeatures { .. }) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}
