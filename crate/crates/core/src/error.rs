use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {field}: {message}")]
    Parse { field: String, message: String },

    #[error("integrity error for {file}: {message}")]
    Integrity { file: String, message: String },

    #[error("incompatible zoos: {0}")]
    Incompatible(String),

    #[error("token structure error: {0}")]
    Structure(String),

    #[error("degenerate token at row {row}: mask has no signal entries")]
    DegenerateToken { row: usize },

    #[error("contrastive loss needs at least 2 samples per view, got {0}")]
    InsufficientNegatives(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },

    #[error("batch-norm conditioning error: {0}")]
    Conditioning(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
