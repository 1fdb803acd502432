use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("prompt too long: {len} tokens (max {max})")]
    PromptTooLong { len: usize, max: usize },

    #[error("rank {rank} exceeds projection dims ({d_in} -> {d_out})")]
    RankTooLarge {
        rank: usize,
        d_in: usize,
        d_out: usize,
    },

    #[error("invalid layer index {index} (valid: 1..={max})")]
    LayerIndex { index: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("masks `{first}` and `{second}` overlap at {cells} latent cells")]
    OverlappingMasks {
        first: String,
        second: String,
        cells: usize,
    },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(f32),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
