use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported wavelet family: {0}")]
    UnsupportedWavelet(String),

    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("malformed pyramid: {0}")]
    MalformedPyramid(String),

    #[error("alignment unsupported: {0}")]
    AlignmentUnsupported(String),

    #[error("degenerate window: no valid positions")]
    DegenerateWindow,

    #[error("insufficient context: need at least 2 patches, got {0}")]
    InsufficientContext(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("format error: {0}")]
    Format(String),

    #[error("version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("ingestion error in {path} at row {row}: {message}")]
    Ingest {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("no series found: {0}")]
    NoSeries(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
