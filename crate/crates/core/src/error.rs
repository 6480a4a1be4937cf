use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants follow the failure classes used throughout the library:
/// bad arguments, unsupported degrees, misuse of a tape or head, numeric
/// blow-ups and I/O problems with dataset or checkpoint files.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite evaluation at component {index}: {message}")]
    NonFinite { index: usize, message: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("load error at record {record}: {message}")]
    Load { record: usize, message: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
