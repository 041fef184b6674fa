// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io;
use std::path::PathBuf;

/// Errors produced by `snmf-core`.
#[derive(Debug, thiserror::Error)]
pub enum SnmfError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic in {path}: expected \"AMX1\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported AMX version {0:#04x}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0:#04x}")]
    UnsupportedDtype(u8),

    #[error("truncated or oversized AMX payload in {path}: header declares {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("matrix dimensions {rows}x{cols} overflow the addressable size")]
    DimensionOverflow { rows: u64, cols: u64 },

    #[error("malformed metadata in {path}: {reason}")]
    Metadata { path: PathBuf, reason: String },

    #[error("missing bundle component {0}")]
    MissingComponent(PathBuf),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input contains non-finite values")]
    NonFinite,

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("fine-tuning diverged at step {step}: loss {loss:e} exceeds 10x the initial {initial:e}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = SnmfError> = std::result::Result<T, E>;

impl SnmfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        SnmfError::Io {
            path: path.into(),
            source,
        }
    }
}
