use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("recording `{source_id}` has {len} samples, shorter than the window length {window_len}")]
    RecordingTooShort {
        source_id: String,
        len: usize,
        window_len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("class `{class}` has {available} windows, fewer than the {parts} split parts")]
    ClassTooSmall {
        class: usize,
        available: usize,
        parts: usize,
    },

    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("support set is empty")]
    EmptySupportSet,

    #[error("entry is not unit-normalized (norm {0})")]
    NotNormalized(f64),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("no oracle label for pool index {0}")]
    MissingLabel(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown task `{name}`; known tasks: {known}")]
    UnknownTask { name: String, known: String },

    #[error("manifest {path}, row {row}: {message}")]
    Manifest {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by non-finite numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NanGradient(_))
    }
}
