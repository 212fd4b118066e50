use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the memory engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("clock regression: now={now} is before last access {last_access}")]
    ClockRegression { now: u64, last_access: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported snapshot version {found} (supported: {supported:?})")]
    UnsupportedVersion { found: u32, supported: &'static [u32] },

    #[error("corrupt snapshot: invariant `{invariant}` violated: {detail}")]
    Corrupt { invariant: &'static str, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn is_provider_unavailable(&self) -> bool {
        matches!(self, Error::ProviderUnavailable(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
