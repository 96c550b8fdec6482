use std::path::PathBuf;

use thiserror::Error;

use crate::embedder::EmbedderConfig;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structural problem in a persisted artifact, located by byte offset.
    #[error("{what}: malformed data at byte {offset}: {detail}")]
    Format {
        what: String,
        offset: u64,
        detail: String,
    },

    /// Stored digest disagrees with the bytes on disk.
    #[error("{what}: checksum mismatch in bytes {start}..{end}")]
    Checksum { what: String, start: u64, end: u64 },

    #[error("json error in {what}: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("duplicate document title {0:?}")]
    DuplicateTitle(String),

    #[error("dimension mismatch ({context}): expected {expected}, found {found}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("embedder config mismatch: store has {stored:?}, got {given:?}")]
    ConfigMismatch {
        stored: Box<EmbedderConfig>,
        given: Box<EmbedderConfig>,
    },

    #[error("unknown document id {0}")]
    UnknownDocument(u32),

    #[error("no entry for query {0:?}")]
    MissingQuery(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn json(what: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            what: what.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than a broken internal invariant.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Invariant(_))
    }
}
