use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed JSON: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Ingest { path: PathBuf, line: usize, msg: String },

    #[error("{0} is not a dataset directory (no meta.json)")]
    NotADataset(PathBuf),

    #[error("{what} format version {found} is not supported (expected {expected})")]
    Incompatible { what: &'static str, found: u32, expected: u32 },

    #[error("{file}: checksum mismatch")]
    Checksum { file: PathBuf },

    #[error("{file}: {msg}")]
    Decode { file: PathBuf, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}; offending batch: {batch:?}")]
    NonFiniteLoss { step: u64, batch: Vec<String> },

    #[error("refusing to resume: {0}")]
    Refused(String),

    #[error("{0}")]
    NotFound(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Returns a [`Error::Contract`] unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
