use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{what} is not symmetric positive semidefinite ({detail})")]
    NotPsd { what: &'static str, detail: String },

    #[error("{what} is not positive definite")]
    NotPd { what: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    RiccatiNoConvergence { iterations: usize, residual: f64 },

    #[error("model is not {0}")]
    Structure(&'static str),

    #[error("matrix {0} is singular")]
    Singular(&'static str),

    #[error("regressor matrix is rank deficient (rank {rank} < {needed})")]
    RankDeficient { rank: usize, needed: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: u64, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("policy artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error("config digest mismatch: artifact {artifact}, config {config}")]
    DigestMismatch { artifact: String, config: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
