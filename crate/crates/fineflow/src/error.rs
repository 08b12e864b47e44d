use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate. Each variant names the subsystem that
/// produced it so CLI diagnostics stay module-qualified.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {context}: {message}")]
    Shape {
        context: &'static str,
        message: String,
    },

    #[error("domain error in {context}: {message}")]
    Domain {
        context: &'static str,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, message: impl Into<String>) -> Self {
        Error::Shape {
            context,
            message: message.into(),
        }
    }

    pub(crate) fn domain(context: &'static str, message: impl Into<String>) -> Self {
        Error::Domain {
            context,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
