use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{count} measurements cannot be split into {batches} equal batches")]
    IndivisibleBatches { count: usize, batches: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("row index {row} out of range for {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },

    #[error("all {restarts} restarts diverged")]
    AllRestartsDiverged { restarts: usize },

    #[error("empty candidate set for {0}")]
    EmptyCandidates(&'static str),

    #[error("weight file {path}: {source}")]
    WeightFormat {
        path: PathBuf,
        source: WeightFormatError,
    },

    #[error("problem directory {path}: {reason}")]
    ProblemFormat { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Failure modes when decoding the binary weight format. Kept separate from
/// [`Error`] so callers can distinguish a wrong file from a damaged one.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WeightFormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("header dims are invalid: {0}")]
    InvalidDims(String),

    #[error("payload truncated: expected {expected} more bytes")]
    Truncated { expected: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
