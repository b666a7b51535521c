use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: {message} (at byte {offset})")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("unsupported segmentation payload on annotation {annotation_id}")]
    UnsupportedMask { annotation_id: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no fitting box position")]
    NoFit,

    #[error("no admissible instance for candidate")]
    NoMatch,

    #[error("shape distribution is empty")]
    EmptyDistribution,

    #[error("dataset has no instance masks")]
    MissingMasks,

    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),

    #[error("scorer protocol error (message {id:?}): {message}")]
    Protocol { id: Option<u64>, message: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn protocol(id: Option<u64>, message: impl Into<String>) -> Self {
        Error::Protocol {
            id,
            message: message.into(),
        }
    }
}
