use std::io;

use thiserror::Error;

/// Errors produced by the measurement framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("window size {k} exceeds image side {side}")]
    WindowTooLarge { k: usize, side: usize },

    #[error("requested {requested} dimensions but ambient space has {ambient}")]
    TooManyDimensions { requested: usize, ambient: usize },

    #[error("band side {side} out of range 1..={max}")]
    BandOutOfRange { side: usize, max: usize },

    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid class index {index} for a model with {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("subspace uninformative at x: projected gradient vanishes")]
    SubspaceUninformative,

    #[error("infinite margin in S: projected weight norm is zero")]
    InfiniteMargin,

    #[error("exact logit tie at the observation point")]
    LogitTie,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unsupported file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
