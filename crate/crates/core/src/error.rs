use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("requested rank {requested} exceeds the {available} available")]
    Rank { requested: usize, available: usize },

    #[error("iteration failed: {message} (residuals: {residuals:?})")]
    Iteration {
        message: String,
        residuals: Vec<f64>,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("dimension {dim} exceeds the dense limit {limit}; use a low-rank approximation path instead")]
    UseDenseFallback { dim: usize, limit: usize },

    #[error("invalid loss specification: {0}")]
    InvalidLossSpec(String),

    #[error("provenance mismatch: expected {expected}, found {found}")]
    Provenance { expected: String, found: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("result table is empty")]
    EmptyResult,

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for the command-line runner: 2 for configuration
    /// and input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_) => 2,
            Error::InvalidLossSpec(_) | Error::EmptyResult => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
