use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("input of {len} samples is shorter than the encoder minimum of {min}")]
    TooShort { len: usize, min: usize },

    #[error("ctc target of length {target_len} (with {repeats} adjacent repeats) does not fit in {frames} frames")]
    InfeasibleTarget {
        target_len: usize,
        repeats: usize,
        frames: usize,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("clip `{clip}`: {msg}")]
    Data { clip: String, msg: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint at byte offset {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    #[error("non-finite loss at step {step} (batch {batch:?})")]
    NanLoss { step: u64, batch: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
