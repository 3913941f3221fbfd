//! Convolutional auto-encoder with hand-written backpropagation.
//!
//! Encoder stage: 3x3 conv (pad 1) -> ReLU -> 2x2 max-pool. The pool is
//! skipped once the feature map is 1x1, so small inputs can run a full
//! stage stack. Decoder stage: nearest 2x upsample (mirroring the encoder's
//! pools) -> 3x3 conv -> ReLU, with a linear final stage. The latent code is
//! the flattened 1x1xL output of the last encoder stage.
//!
//! Storage precision is generic ([`Real`]); training uses `f32` and the
//! gradient checks use `f64`. Loss and cross-chunk gradient sums are always
//! accumulated in `f64`.

pub mod layers;
mod model;
mod train;

use std::fmt::Debug;
use std::ops::{AddAssign, SubAssign};

use ndarray::LinalgScalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{loss, AutoEncoder, Batch, ConvLayer, ForwardOutput, Gradients};
pub use train::{train, TrainConfig};

#[derive(Debug, Error)]
pub enum CaeError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot train on an empty patch set")]
    EmptyPatchSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged (non-finite loss)")]
    NonFinite,
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating-point storage type for the network.
pub trait Real: LinalgScalar + PartialOrd + AddAssign + SubAssign + Debug + Default + Send + Sync {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Network shape: square `size`x`size` input with `channels` channels and
/// one encoder stage per entry of `widths`; the last width is the latent
/// dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaeArch {
    pub size: usize,
    pub channels: usize,
    pub widths: Vec<usize>,
}

impl CaeArch {
    pub const PER_METRIC_LATENT: usize = 32;
    pub const STACKED_LATENT: usize = 64;

    pub fn with_latent(channels: usize, latent: usize) -> Self {
        Self {
            size: 16,
            channels,
            widths: vec![8, 16, 32, latent],
        }
    }

    /// Single-metric network with a 32-dimensional latent code.
    pub fn per_metric() -> Self {
        Self::with_latent(1, Self::PER_METRIC_LATENT)
    }

    /// Multi-channel network over stacked metrics, 64-dimensional latent.
    pub fn stacked(channels: usize) -> Self {
        Self::with_latent(channels, Self::STACKED_LATENT)
    }

    pub fn validate(&self) -> Result<(), CaeError> {
        if self.size < 2 || !self.size.is_power_of_two() {
            return Err(CaeError::InvalidArch(format!(
                "input size {} must be a power of two >= 2",
                self.size
            )));
        }
        if self.channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(CaeError::InvalidArch("channels and widths must be positive".into()));
        }
        if self.widths.len() < self.size.trailing_zeros() as usize {
            return Err(CaeError::InvalidArch(format!(
                "{} stages cannot reduce {}x{} to 1x1",
                self.widths.len(),
                self.size,
                self.size
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn latent_dim(&self) -> usize {
        *self.widths.last().expect("validated arch has stages")
    }

    /// Values per input patch.
    pub fn input_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    /// Whether encoder stage `i` pools.
    pub fn encoder_pools(&self) -> Vec<bool> {
        let mut spatial = self.size;
        self.widths
            .iter()
            .map(|_| {
                let pools = spatial > 1;
                if pools {
                    spatial /= 2;
                }
                pools
            })
            .collect()
    }

    /// `(c_in, c_out)` of every conv layer: encoder stages, then decoder
    /// stages.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let s = self.stages();
        let mut shapes = Vec::with_capacity(2 * s);
        let mut c_in = self.channels;
        for &w in &self.widths {
            shapes.push((c_in, w));
            c_in = w;
        }
        for j in 0..s {
            let c_out = if j + 1 == s { self.channels } else { self.widths[s - 2 - j] };
            shapes.push((self.widths[s - 1 - j], c_out));
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.conv_shapes().iter().map(|&(ci, co)| 9 * ci * co + co).sum()
    }
}
