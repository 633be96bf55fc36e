use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("malformed operation: {0}")]
    MalformedOperation(String),

    #[error("invalid prune: {0}")]
    InvalidPrune(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("invalid stream: {0}")]
    InvalidStream(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("report has no graded tasks")]
    EmptyReport,

    #[error("correlation undefined: zero variance")]
    UndefinedCorrelation,

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
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
