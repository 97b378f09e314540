use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid range: lo ({lo}) must be < hi ({hi})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("non-finite function value while perturbing coordinate {coordinate}")]
    NumericFailure { coordinate: usize },

    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    InvalidBatch(usize),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("inconsistent state: {0}")]
    InconsistentState(String),

    #[error("unknown model `{0}` (expected 2DFrameCNN, 2DSeqCNN or 3DSeqCNN)")]
    UnknownModel(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("trace `{0}` has zero range and cannot be min-max normalized")]
    DegenerateTrace(String),

    #[error("window [{start}, {end}) outside frame range 0..{frames}")]
    InvalidWindow {
        start: usize,
        end: usize,
        frames: usize,
    },

    #[error("ingest error in {}: {message}", path.display())]
    Ingest { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    TrainingFailure { epoch: usize },

    #[error("layer {index} is not a convolution; valid conv layers: {valid:?}")]
    InvalidLayer { index: usize, valid: Vec<usize> },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }
}
