//! Error type shared by every module in the crate.
//!
//! Errors fall into two broad families that the CLI maps onto distinct exit
//! codes: data/configuration problems (bad files, bad shapes, bad graphs) and
//! numeric failures (NaN/Inf showing up where finite values are required).

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum PhgError {
    /// Tensor shape mismatch or unsupported shape for an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration file or config value is malformed.
    #[error("config error: {0}")]
    Config(String),

    /// Scene/modality data on disk is missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// File format violation (bad magic, truncated payload, ...).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A non-finite value (NaN/Inf) appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The derivation graph contains a cycle.
    #[error("cycle in derivation graph: {0}")]
    Cycle(String),

    /// An evaluation-only oracle was invoked while training is active.
    #[error("oracle guard: {0} refuses to run inside a training loop")]
    OracleGuard(&'static str),

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PhgError {
    /// Helper to wrap an io::Error with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PhgError::Io { path: path.into(), source }
    }

    /// True for errors in the "numeric failure" family (CLI exit code 4);
    /// everything else is a data/config failure (exit code 3).
    pub fn is_numeric(&self) -> bool {
        matches!(self, PhgError::Numeric(_))
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PhgError>;
