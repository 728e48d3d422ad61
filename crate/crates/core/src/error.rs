use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible dimensions between two operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside the domain of an operation (tau <= 0, zero vector, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint, manifest or mask file. `path` locates the offending field.
    #[error("format error at {path}: {msg}")]
    Format { path: String, msg: String },

    /// Schema violation in a line-delimited JSON file.
    #[error("line {line}: field '{field}': {msg}")]
    Schema {
        line: usize,
        field: String,
        msg: String,
    },

    /// Dataset content that is well-formed but inconsistent (unknown class, empty filter, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
