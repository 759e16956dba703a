use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the correspondence pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("mask is empty")]
    EmptyMask,

    #[error("no foreground patches selected by the mask")]
    EmptyForeground,

    #[error("image of {width}x{height} is smaller than one {patch_size}px patch")]
    ImageTooSmall {
        width: usize,
        height: usize,
        patch_size: usize,
    },

    #[error("descriptor of {grid} patch {patch} has zero norm")]
    ZeroNormDescriptor { grid: &'static str, patch: usize },

    #[error("point ({x}, {y}) lies outside the {frame} bounds {width}x{height}")]
    OutOfBounds {
        x: f64,
        y: f64,
        frame: &'static str,
        width: f64,
        height: f64,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("checkpoint section `{section}` is corrupt: {message}")]
    CorruptCheckpoint { section: String, message: String },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("the {0} expert is training-free and cannot be trained")]
    TrainingFree(&'static str),

    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<usize> },

    #[error("scene generation failed after {0} attempts")]
    GenerationFailed(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
