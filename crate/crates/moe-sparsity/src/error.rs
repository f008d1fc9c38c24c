//! Crate-wide error type and exit-code classification.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments to an operation (shape mismatch, empty vector, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Inconsistent model or run configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// All candidate routing weights are zero; Eq-style renormalization is undefined.
    #[error("degenerate routing: candidate weights sum to zero")]
    DegenerateRouting,

    /// Calibration statistics are missing or empty.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Exhaustive subset search would exceed the enumeration guard.
    #[error("subset enumeration C({n},{r}) = {candidates} exceeds the guard limit {max}")]
    EnumerationGuard {
        n: usize,
        r: usize,
        candidates: u128,
        max: u64,
    },

    /// File does not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    /// File carries a format version this build does not understand.
    #[error("unsupported version {found} in {path} (expected {expected})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// File ends before the header-declared payload.
    #[error("truncated file {path}: wanted {wanted} more bytes")]
    Truncated { path: PathBuf, wanted: usize },

    /// File contents disagree with the header-declared shapes.
    #[error("shape inconsistency in {path}: {reason}")]
    ShapeInconsistency { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: config errors 2, I/O and file-format errors 3,
    /// the enumeration guard 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::InvalidConfig(_)
            | Error::DegenerateRouting
            | Error::Calibration(_) => 2,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::ShapeInconsistency { .. }
            | Error::Io { .. }
            | Error::Json { .. } => 3,
            Error::EnumerationGuard { .. } => 4,
        }
    }
}
