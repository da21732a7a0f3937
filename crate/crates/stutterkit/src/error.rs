//! Crate-wide error type and result alias.

use std::path::PathBuf;

/// All failure modes surfaced by the toolkit.
///
/// The variants are grouped so that the CLI can map them onto stable process
/// exit codes: configuration problems (exit 2), data/HW problems (exit 3),
/// and numeric failures during optimization (exit 4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration, CLI arguments, or incompatible model setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// Filesystem-level failure on a specific path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Audio that cannot be decoded or violates format requirements.
    #[error("audio error: {0}")]
    Audio(String),

    /// Manifest, label, or split-level data problems.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatches, e.g. transplanting incompatible checkpoints.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite losses or other numeric breakdowns during optimization.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Wrap an `io::Error` together with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Io { .. } | Error::Audio(_) | Error::Data(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
