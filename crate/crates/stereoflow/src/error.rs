use thiserror::Error;

/// Errors produced by the library. The CLI maps these onto exit codes:
/// validation/usage problems, numerical failures, and I/O or file-format
/// problems are distinguished so scripts can react to each class.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
