use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("no valid records in {path} ({skipped} malformed lines skipped)")]
    EmptyCorpus { path: PathBuf, skipped: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("row {row} has no attended positions")]
    EmptyRow { row: usize },

    #[error("zero-length vector in cosine similarity")]
    ZeroVector,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("key {index} is not unit length (norm {norm})")]
    NotNormalized { index: usize, norm: f64 },

    #[error("gold code for query {query_id} is missing from the candidate pool")]
    GoldMissing { query_id: String },

    #[error("index was built with model {index} but the checkpoint is {checkpoint}")]
    StaleIndex { index: String, checkpoint: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("corrupt {0}")]
    Corrupt(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
