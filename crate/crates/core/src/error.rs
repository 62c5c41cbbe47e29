//! Error type shared by every module in the crate.
//!
//! Errors carry a [`ErrorClass`] so the CLI can map failures onto stable
//! process exit codes (config = 2, precondition = 3, numerical = 4).

use std::path::PathBuf;

/// Coarse failure class, used for exit-code mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed configuration, schema violation, bad flag value.
    Config,
    /// An operation precondition does not hold (missing data, bad shape).
    Precondition,
    /// Numerical failure at runtime (degenerate gradient, singular matrix).
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Classification used by the CLI exit-code contract.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Json { .. } => ErrorClass::Config,
            Error::Precondition(_) | Error::Io { .. } | Error::Image { .. } => {
                ErrorClass::Precondition
            }
            Error::Numeric(_) => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
