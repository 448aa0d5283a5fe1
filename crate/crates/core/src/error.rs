use thiserror::Error;

/// Errors raised by the optimizer, the problem factories and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("coordinate set must be strictly increasing")]
    UnorderedCoords,

    #[error("NaN encountered in {0}")]
    NaN(&'static str),

    #[error("unknown problem: {0}")]
    UnknownProblem(String),

    #[error("invalid problem definition: {0}")]
    InvalidProblem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("task {0} is terminated and cannot be executed")]
    TaskTerminated(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
