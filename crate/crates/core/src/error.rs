use std::path::PathBuf;

use crate::tensor::Shape4;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape4,
        right: Shape4,
    },

    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape4,
        len: usize,
        expected: usize,
    },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("loss must be a scalar, got shape {0}")]
    NotScalar(Shape4),

    #[error("value {0} does not belong to this tape")]
    UnknownValue(usize),

    #[error("batchnorm running statistics are not initialized; run a train step first or initialize them explicitly")]
    RunningStatsUninitialized,

    #[error("argmedian indices do not match: recorded {recorded}, got gradient of shape {given}")]
    StaleIndices { recorded: Shape4, given: Shape4 },

    #[error("non-finite training loss at step {step}: loss = {loss}, max |grad| = {max_grad}")]
    NonFiniteLoss { step: u64, loss: f64, max_grad: f64 },

    #[error("patch size {patch} exceeds image size {width}x{height}")]
    PatchTooLarge {
        patch: usize,
        width: usize,
        height: usize,
    },

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
