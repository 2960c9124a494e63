//! Crate-wide error type.

use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or layer was given data whose shape does not match.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of its valid range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A network geometry is infeasible for the requested input size.
    #[error("infeasible geometry: {0}")]
    Geometry(String),

    /// A value left the numeric domain an operation requires.
    #[error("numeric domain: {0}")]
    Domain(String),

    /// Input data failed validation; carries one message per problem.
    #[error("invalid data: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// A file had the wrong format.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image decoding or encoding failure.
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    /// Annotates an `io::Error` with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Shorthand for a parse error at `path`.
    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
