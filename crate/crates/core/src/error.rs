use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("failed to load dataset record `{record}`: {reason}")]
    Record { record: String, reason: String },

    #[error("dataset load error: {0}")]
    Load(String),

    #[error("invalid modality mask: {0}")]
    Mask(String),

    #[error("unknown head `{0}`")]
    UnknownHead(String),

    #[error("unknown loss mode `{0}`")]
    UnknownLossMode(String),

    #[error("invalid loss input: {0}")]
    Loss(String),

    #[error("undefined metric: {0}")]
    Metric(String),

    #[error("non-finite value in `{path}`")]
    NonFinite { path: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
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
