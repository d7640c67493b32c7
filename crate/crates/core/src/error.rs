use std::path::PathBuf;

/// Errors produced by the detection engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated while reading {context}")]
    Truncated { context: String },

    #[error("file has {extra} trailing bytes beyond its declared contents")]
    TrailingBytes { extra: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm feature vector in {0}")]
    ZeroVector(String),

    #[error("id of {0} bytes exceeds the 65535-byte limit")]
    IdTooLong(usize),

    #[error("invalid one-hot label row {row} in {context}")]
    InvalidOneHot { context: String, row: usize },

    #[error("degenerate prototype: mean feature norm {0:e} below 1e-12")]
    DegeneratePrototype(f64),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("every key is masked for query {0}")]
    AllKeysMasked(usize),

    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }

    /// Coarse classification used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::NonFinite(_)
            | Error::ZeroVector(_)
            | Error::DegeneratePrototype(_)
            | Error::AllKeysMasked(_) => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Validation,
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;
