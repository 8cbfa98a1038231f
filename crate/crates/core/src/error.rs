use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the modelling, fitting, morphology and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid frame grid: {0}")]
    InvalidGrid(String),

    #[error("invalid time-activity curve: {0}")]
    InvalidTac(String),

    #[error("frame grids differ: {0}")]
    GridMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual} ({context})")]
    LengthMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: String,
    },

    #[error("k2 + k3 = {0:e} is too small to normalize the tissue kernel")]
    SingularKernel(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("label {0} not present in mask")]
    LabelAbsent(u16),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

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
