use std::path::PathBuf;

use thiserror::Error;

use crate::params::ParamStore;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("{what}: index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward requires a 1x1 scalar, got {0:?}")]
    NonScalar([usize; 2]),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("every position is masked")]
    AllMasked,

    #[error("empty sequence given to {0}")]
    EmptySequence(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pivot decode produced no tokens (degenerate captioner)")]
    DegeneratePivot,

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        /// Parameters of the last completed validation checkpoint.
        last_good: Vec<ParamStore>,
    },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: hash mismatch (expected {expected}, found {found})")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path} exists: the output directory is in use by another run (delete the file if that run is dead)")]
    Locked { path: PathBuf },

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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
