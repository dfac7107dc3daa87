use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config value for `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("no relevance labels available")]
    MissingLabels,
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: [u8; 4] },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config { .. } => "config",
            Error::UnknownKey(_) => "unknown_key",
            Error::EmptyDataset => "empty_dataset",
            Error::ZeroNorm => "zero_norm",
            Error::NonFinite { .. } => "non_finite",
            Error::MissingLabels => "missing_labels",
            Error::BadMagic { .. } => "bad_magic",
            Error::Corrupt { .. } => "corrupt",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
