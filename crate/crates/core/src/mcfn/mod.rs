//! Multi-magnification cross-level fusion network.
//!
//! Each level's tokens are conditioned on a learned magnification token
//! (MAB), fused with resampled tokens from the adjacent levels (CMB) and
//! decoded into a 256×256 heatmap. Gradients are computed by hand.

mod attention;
mod decoder;
mod grid;
mod model;
mod params;

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::pyramid::{FloatMap, PyramidError};

pub use attention::{attention_backward, attention_forward, attn, AttnForward, AttnInputGrads, ProjectionSet};
pub use decoder::{decoder_backward, decoder_forward, Conv3x3, DecoderCache, DecoderParams};
pub use grid::{resample_grid, GridResampler};
pub use model::{
    backward_level, cmb_forward, decode, forward_all, forward_level, mab_forward, mcfn_forward, LevelCache,
};
pub use params::{Ablation, CmbScope, McfnConfig, McfnParams};

#[derive(Debug, Error)]
pub enum McfnError {
    #[error("non-finite value in {0}")]
    NumericInput(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("cannot resample token grid: {0}")]
    Resample(String),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, McfnError>;

/// Predicted navigation map for one level, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub level_index: usize,
    pub map: FloatMap,
}

impl Heatmap {
    pub fn side(&self) -> usize {
        self.map.width
    }
}
