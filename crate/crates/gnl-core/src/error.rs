//! Error type shared across the crate.

use std::fmt;

/// Errors raised by configuration validation, shape checks, file formats,
/// and numeric failures during training.
#[derive(Debug)]
pub enum GnlError {
    /// Invalid configuration (bad channel progression, empty dataset, ...).
    Config(String),
    /// Tensor shape does not match what the operation requires.
    Shape(String),
    /// A file (checkpoint, manifest, image, score map) is malformed.
    Format(String),
    /// Non-finite value where a finite one is required; training aborts.
    Numeric(String),
    /// A metric is undefined for the given inputs (e.g. single-class AUROC).
    UndefinedMetric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for GnlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Shape(msg) => write!(f, "shape error: {msg}"),
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Self::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
            Self::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for GnlError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for GnlError {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, GnlError>;
