//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{what}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid {what}: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),

    #[error("unknown parameter name {0:?}")]
    UnknownParam(String),

    #[error("sequence is empty")]
    EmptySequence,

    #[error("sample set is empty")]
    EmptySet,

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("checksum failure for tensor {tensor:?}")]
    ChecksumFailure { tensor: String },

    #[error("config mismatch: {detail}")]
    ConfigMismatch { detail: String },

    #[error("bad magic bytes (expected {expected:?})")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
