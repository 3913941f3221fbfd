//! Deep bag-of-words features for region-based classification of
//! multi-metric volumetric scans.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! - [`dataio`]: subject records, the DBV1 volume format, dataset manifests
//!   and mean-matched phantom generation.
//! - [`patchex`]: overlapping 2D patch extraction from masked regions and
//!   per-channel normalization.
//! - [`cae`]: a convolutional auto-encoder with hand-written backpropagation,
//!   used to turn patches into latent codes.
//! - [`vocab`]: k-means visual vocabularies and bag-of-words histograms.
//! - [`features`]: subject-level feature vectors, the region-mean baseline
//!   and standardization.
//! - [`learn`]: RBF-SVM (SMO solver plus a QP oracle), grid search, greedy
//!   forward selection and correlation ranking.
//! - [`eval`]: confusion metrics and the repeated-split and heldout-ensemble
//!   protocols.
//! - [`pipeline`]: configuration and the feature families that tie the
//!   stages together.

pub mod cae;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod features;
pub mod learn;
pub mod patchex;
pub mod pipeline;
pub mod seed;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};
