use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("window does not cover signal at sample {0}")]
    WindowCoverage(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate pair: {0}")]
    DegeneratePair(String),

    #[error("unsupported wav {field}: {detail}")]
    WavFormat { field: &'static str, detail: String },

    #[error("wav decode error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {what} at parameter `{param}`")]
    NonFiniteTraining { what: &'static str, param: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
