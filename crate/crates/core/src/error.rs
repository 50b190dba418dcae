use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("invalid tube: {0}")]
    InvalidTube(String),
    #[error("non-finite box delta {0:?}")]
    NonFiniteDelta([f64; 4]),
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("image {width}x{height} too small for trajectory of class {class_id} (needs {needed:.1} px)")]
    ImageTooSmall {
        width: usize,
        height: usize,
        class_id: usize,
        needed: f64,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("malformed clip file {path}: {message}")]
    ClipFormat { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
