use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FbrhtError>;

#[derive(Debug, Error)]
pub enum FbrhtError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    /// The fitter cannot produce a model, e.g. all training labels agree.
    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("diagnostic unavailable: {0}")]
    Diagnostic(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed sample file: {0}")]
    Format(String),

    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}
