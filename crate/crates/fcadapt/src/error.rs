//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI reports them: configuration and
//! contract violations exit with code 2, runtime failures (I/O, numerics,
//! checkpoint mismatches) exit with code 1.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A referenced file could not be read.
    #[error("load error for subject '{subject}': {source}")]
    Load {
        subject: String,
        #[source]
        source: std::io::Error,
    },

    /// A matrix entry failed validation.
    #[error("data error in '{subject}': non-finite value at row {row}, column {col}")]
    NonFinite {
        subject: String,
        row: usize,
        col: usize,
    },

    /// File contents disagree with the manifest or with other files.
    #[error("schema error: {0}")]
    Schema(String),

    /// Bad configuration, bad CLI usage, or a violated manifest invariant.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an API precondition (shape mismatch, empty input, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Out-of-range argument.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Non-finite values produced during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input series shorter than one window.
    #[error("series too short: length {length} < window length {window}")]
    SeriesTooShort { length: usize, window: usize },

    /// A loaded checkpoint does not match the expected architecture.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("I/O error on '{path}': {source}")]
    Io {
        path: PathBuf,
        #[source]
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

    /// Process exit code the CLI uses for this error: 2 for usage/config
    /// problems, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Bounds(_) => 2,
            Error::SeriesTooShort { .. } => 2,
            Error::Load { .. }
            | Error::NonFinite { .. }
            | Error::Schema(_)
            | Error::Numeric(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => 1,
        }
    }
}
