//! Crate-wide error type. Exit-code mapping for the CLI lives here so every
//! subcommand reports failures the same way: 1 for validation problems, 2 for
//! I/O problems.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed binary container (bad magic, truncated payload, bad dtype).
    #[error("format error: {0}")]
    Format(String),

    /// Input violated a documented invariant; the message names the field.
    #[error("validation error: {0}")]
    Validation(String),

    /// Array shape or length mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Row ids of two tables do not line up.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Requested a capability the value does not carry (e.g. MDI importance
    /// from a model that never tracked impurity).
    #[error("capability error: {0}")]
    Capability(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Csv(e) if e.is_io_error() => 2,
            _ => 1,
        }
    }
}
