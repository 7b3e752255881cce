use std::io;

use thiserror::Error;

/// Errors produced by the statistics, loss and training code.
#[derive(Debug, Error)]
pub enum SdcaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("class {0} has no statistics yet")]
    UninitializedClass(usize),

    #[error("no valid (non-ignored) pixels")]
    NoValidPixels,

    #[error("invalid target size {target_h}x{target_w} for source {h}x{w}")]
    InvalidSize {
        h: usize,
        w: usize,
        target_h: usize,
        target_w: usize,
    },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("unknown sweep parameter `{0}`")]
    UnknownParameter(String),

    #[error("training diverged (non-finite loss) at iteration {0}")]
    Diverged(u64),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SdcaError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(SdcaError::DimensionMismatch { expected, got });
    }
    Ok(())
}
