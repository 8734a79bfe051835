use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree on a specific axis.
    #[error("dimension mismatch on axis {axis}: {detail}")]
    Dimension { axis: usize, detail: String },

    /// A shape/geometry constraint failed (e.g. input side not divisible by 2^L).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// The requested model configuration cannot be constructed.
    #[error("capability error: {0}")]
    Capability(String),

    /// An index fell outside its legal range.
    #[error("index {index} out of range (limit {limit})")]
    IndexRange { index: usize, limit: usize },

    /// Backward was called on a tape that was already consumed.
    #[error("stale tape: backward already ran; build a fresh graph")]
    StaleTape,

    /// Batch statistics are undefined for this batch size.
    #[error("degenerate batch: batchnorm train mode needs batch size >= 2, got {0}")]
    DegenerateBatch(usize),

    /// A forward or backward pass produced NaN/Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A caller-supplied argument is invalid.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The corpus manifest violates an invariant.
    #[error("manifest integrity: {0}")]
    ManifestIntegrity(String),

    /// A per-file I/O or decode failure, with the offending path.
    #[error("file error at {path}: {detail}")]
    File { path: PathBuf, detail: String },

    /// A split that was expected to contain records is empty.
    #[error("empty split: {0}")]
    EmptySplit(String),

    /// Two artifacts (checkpoint/config/corpus) do not fit together.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Checkpoint container is malformed or has the wrong version.
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(axis: usize, detail: impl Into<String>) -> Self {
        Error::Dimension { axis, detail: detail.into() }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
