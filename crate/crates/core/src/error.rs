use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("{path}: not a PNG file ({reason})")]
    NotPng16 { path: PathBuf, reason: String },

    #[error("{path}: unsupported PNG format: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("tensor shape mismatch in {op}: {detail}")]
    TensorShape { op: &'static str, detail: String },

    #[error("subsampling ratio {0} outside (0, 1]")]
    InvalidRatio(f64),

    #[error("confidence {value} at ({row}, {col}) outside [0, 1]")]
    InvalidConfidence { row: usize, col: usize, value: f32 },

    #[error("non-positive depth {value} in {which} at ({row}, {col})")]
    NonPositiveDepth {
        which: &'static str,
        row: usize,
        col: usize,
        value: f32,
    },

    #[error("invalid scene: {0}")]
    InvalidSpec(String),

    #[error("input {height}x{width} is not divisible by {divisor}")]
    ShapeNotDivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("variant {variant} needs input `{input}` which was not provided")]
    VariantInputMissing {
        variant: &'static str,
        input: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
