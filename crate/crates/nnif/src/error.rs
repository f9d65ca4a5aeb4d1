//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("solver diverged: {0}")]
    SolverDiverged(String),

    #[error("dense factorization failed: {0}")]
    FactorizationFailed(String),

    #[error("parameter count {p} exceeds dense-solve cap {cap}")]
    ParamCountOverCap { p: usize, cap: usize },

    #[error("labels contain a single class; need both")]
    SingleClass,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing features: {0}")]
    MissingFeatures(String),

    #[error("stage `{0}` has no valid cached output; run stage `{0}` first")]
    MissingStage(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("run directory {0} is locked by another process (remove the .lock file if stale)")]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
