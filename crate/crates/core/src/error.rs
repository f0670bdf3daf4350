use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("coco ingestion error: {0}")]
    Coco(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {term} (value {value}) at sequential step {step_m}")]
    NonFinite {
        term: String,
        step_m: usize,
        value: f64,
    },

    #[error("domain classifier accuracy {accuracy:.3} below required floor {floor:.3}: {detail}")]
    ClassifierFloor {
        accuracy: f64,
        floor: f64,
        detail: String,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
