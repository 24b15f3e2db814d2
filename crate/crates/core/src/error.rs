use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no interactions")]
    NoInteractions,

    #[error("unknown {kind} {id}")]
    UnknownNode { kind: &'static str, id: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("NaN encountered in {0}")]
    NaN(&'static str),

    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("user {user} has no negative candidate at time {time}")]
    NoNegativeCandidate { user: usize, time: i64 },

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint tensor mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
