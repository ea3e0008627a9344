use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("{op}: input length {len} shorter than required {min}")]
    InputTooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cache mismatch: {0}")]
    Cache(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("simulation diverged at step {step} (t = {time:.6} s)")]
    Simulation { step: usize, time: f64 },

    #[error("alignment error: signal of {len} samples cannot be split into {frames} frames")]
    Alignment { len: usize, frames: usize },

    #[error("value {value} for {what} outside [{min}, {max}]")]
    Range {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("index {index} out of range (count {count})")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("zero reference value in {0}")]
    Division(&'static str),

    #[error("training diverged at epoch {epoch}: {reason}")]
    NonFiniteLoss { epoch: usize, reason: String },

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("incompatible input: {0}")]
    Compatibility(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
