use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{what}: parse error at line {line}, column {column}: {msg}")]
    Parse {
        what: String,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("eigensolver did not converge for a {dim}x{dim} matrix")]
    Eigensolver { dim: usize },

    #[error("product space {dims:?} exceeds the dimension cap {cap}")]
    DimensionTooLarge { dims: Vec<usize>, cap: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite amplitude encountered at t = {t_ns} ns")]
    NonFinite { t_ns: f64 },

    #[error("exact-step propagation would need {steps} eigendecompositions (limit {limit})")]
    TooManySteps { steps: usize, limit: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
