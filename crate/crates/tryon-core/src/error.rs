//! Crate-wide error type.
//!
//! Variants are grouped so callers (notably the CLI) can map failures onto
//! coarse classes: invalid invocation/config, bad data, numeric failure.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Pixel/grid extents of two inputs disagree.
    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    /// Tensor or sequence shapes are inconsistent.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A precondition on an argument failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration value or config file problem.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset layout, manifest, or image-decoding problem.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint / tensor-archive format problem.
    #[error("archive error: {0}")]
    Archive(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse failure class used for process exit codes:
    /// `usage` (2), `data` (3), `numeric` (4).
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => ErrorClass::Usage,
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::ExtentMismatch(_)
            | Error::ShapeMismatch(_)
            | Error::Data(_)
            | Error::Archive(_)
            | Error::Io { .. } => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            ErrorClass::Usage => "E_USAGE",
            ErrorClass::Data => "E_DATA",
            ErrorClass::Numeric => "E_NUMERIC",
        }
    }
}
