use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants are grouped by the stage that raises
/// them so the CLI can map them onto exit codes (config = 2, I/O = 3,
/// numerical = 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}")]
    Config(String),

    #[error("stmap file {path}: bad magic")]
    BadMagic { path: PathBuf },

    #[error("stmap file {path}: unsupported version {version}")]
    VersionMismatch { path: PathBuf, version: u16 },

    #[error("stmap file {path}: truncated payload")]
    Truncated { path: PathBuf },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("insufficient peaks: found {found}, need {need}")]
    InsufficientPeaks { found: usize, need: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Checkpoint { .. } => 3,
            Error::NonFinite { .. } => 4,
            Error::Shape { .. } | Error::InsufficientPeaks { .. } => 2,
        }
    }
}
