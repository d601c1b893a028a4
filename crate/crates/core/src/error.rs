use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Dimension(String),

    #[error("manifest field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("session contains no present records")]
    EmptySession,

    #[error("amplitude normalizer used before fit")]
    UninitializedNormalizer,

    #[error("class {class} has {available} samples, {required} needed for the support set")]
    InsufficientSupport {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("pool of {size} samples exceeds the configured maximum {max}")]
    PoolSize { size: usize, max: usize },

    #[error("class {0} has no template and no fallback")]
    UncoveredClass(usize),

    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("archive format version {found} is incompatible (expected {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("corrupted archive: {0}")]
    Corrupted(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Coarse classification used by the command-line front end to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::IncompatibleVersion { .. } => ErrorKind::Config,
            Error::Schema { .. }
            | Error::EmptySession
            | Error::InsufficientSupport { .. }
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::Corrupted(_)
            | Error::Data(_) => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}
