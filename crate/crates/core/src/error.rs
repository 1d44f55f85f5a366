use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("loss has no contributing positions (every mask entry is false)")]
    EmptyLoss,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("capacity exceeded: {needed} positions requested, model holds {max}")]
    Capacity { needed: usize, max: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("corpus {0} contains no dialogues")]
    EmptyCorpus(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenRange { id: usize, size: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("backbone checksum mismatch: adapter was trained against {expected}, found {found}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
