use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
///
/// The variant names double as the stable error-code prefixes printed by the
/// command-line front end (see [`Error::code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("validity error: {0}")]
    Validity(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("checkpoint error in {field}: {msg}")]
    Checkpoint { field: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-stable prefix, e.g. `E_DIM`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIM",
            Error::Parameter(_) => "E_PARAM",
            Error::Contract(_) => "E_CONTRACT",
            Error::Validity(_) => "E_VALIDITY",
            Error::Internal(_) => "E_INTERNAL",
            Error::Manifest(_) => "E_MANIFEST",
            Error::Config { .. } => "E_CONFIG",
            Error::Checkpoint { .. } => "E_CHECKPOINT",
            Error::Io { .. } => "E_IO",
            Error::Image { .. } => "E_IMAGE",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
