use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {what} at element {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("numeric failure at iteration {iteration}: {detail}")]
    Numeric { iteration: usize, detail: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },

    #[error("invalid architecture at layer {layer}: {reason}")]
    Arch { layer: String, reason: String },

    #[error("architecture text, line {line}: {reason}")]
    ArchParse { line: usize, reason: String },

    #[error("mask error for layer {layer}: {reason}")]
    Mask { layer: String, reason: String },

    #[error("value {value} is not on the quantization grid (element {index})")]
    OffGrid { index: usize, value: f64 },

    #[error("checksum mismatch for {what}: expected {expected}, found {found}")]
    Checksum {
        what: String,
        expected: String,
        found: String,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn arch(layer: impl ToString, reason: impl Into<String>) -> Self {
        Error::Arch {
            layer: layer.to_string(),
            reason: reason.into(),
        }
    }

    /// Coarse classification used by the command-line front-end for exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::Arch { .. }
            | Error::ArchParse { .. }
            | Error::Mask { .. }
            | Error::Unknown { .. }
            | Error::Shape { .. }
            | Error::OffGrid { .. } => ErrorCategory::Config,
            Error::NonFinite { .. } | Error::Numeric { .. } => ErrorCategory::Numeric,
            Error::Checksum { .. } | Error::Format { .. } | Error::Io { .. } | Error::Image { .. } => ErrorCategory::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Io,
}
