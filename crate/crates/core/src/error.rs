use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum SpilError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The covariance has no dominant direction (top eigenvalue below the
    /// degeneracy floor).
    #[error("degenerate covariance: top eigenvalue {0:e}")]
    DegenerateCovariance(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: unsupported checkpoint version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: String,
        expected: u32,
    },
}

pub type Result<T> = std::result::Result<T, SpilError>;

impl SpilError {
    /// Process exit status: 2 for bad input, 3 for version mismatches, 1
    /// otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            SpilError::InvalidInput(_) | SpilError::Io { .. } | SpilError::Parse { .. } => 2,
            SpilError::Version { .. } => 3,
            SpilError::DegenerateCovariance(_) => 1,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SpilError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpilError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        SpilError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
