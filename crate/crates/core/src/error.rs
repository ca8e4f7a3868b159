use std::path::PathBuf;

use crate::diffcore::DiffError;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value produced by {stage}")]
    NonFinite { stage: String },

    #[error("non-finite loss at batch rows {rows:?}")]
    NonFiniteLoss { rows: Vec<usize> },

    #[error("singular linear layer {layer}: |det| = {det:e}")]
    SingularLayer { layer: usize, det: f64 },

    #[error("trajectory too short: length {length}, need at least {required}")]
    TrajectoryTooShort { length: usize, required: usize },

    #[error("initial condition invalid: S+I+R = {sum} (must equal 1 within 1e-9)")]
    InitialCondition { sum: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("degenerate nearest-neighbour distance at sample {index}")]
    DegenerateDistance { index: usize },

    #[error("zero denominator at indices {indices:?}")]
    ZeroDenominator { indices: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("incompatible checkpoint and data: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
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
}
