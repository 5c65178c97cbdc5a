use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for parent size {parent}")]
    IndexOutOfRange { index: usize, parent: usize },

    #[error("index set is not strictly increasing at position {position}")]
    UnsortedIndices { position: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("drop probability {0} outside [0, 1)")]
    DropProbability(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: malformed data: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, minibatch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("trace does not match the requested operation: {0}")]
    Trace(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// Broad failure class, used by the command-line tool to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::DropProbability(_) | Error::Json(_) => ErrorClass::Config,
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::Format { .. }
            | Error::Integrity(_)
            | Error::Io { .. }
            | Error::Csv(_) => ErrorClass::Data,
            Error::NonFinite(_) | Error::Diverged { .. } => ErrorClass::Numeric,
            Error::Shape { .. }
            | Error::IndexOutOfRange { .. }
            | Error::UnsortedIndices { .. }
            | Error::Trace(_) => ErrorClass::Internal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Internal,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Internal => 5,
        }
    }
}
