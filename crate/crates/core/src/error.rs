use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// configuration/shape problems, numeric failures, and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A caller-supplied value is out of range or otherwise invalid.
    #[error("invalid argument: {0}")]
    Arg(String),

    /// A run or model configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value was produced; `context` names the offending
    /// parameter or tensor.
    #[error("numeric error in `{context}`: {message}")]
    Numeric { context: String, message: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Arg(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
