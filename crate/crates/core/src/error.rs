//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch (lhs {lhs:?}, rhs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },

    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("embedding id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: i64, classes: usize },

    #[error("sequence of length {len} too short for filter width {width}")]
    SequenceTooShort { len: usize, width: usize },

    #[error("no valid positions (valid_len = 0)")]
    EmptyValidRange,

    #[error("sequence length {len} exceeds max_positions {max_positions}")]
    SequenceTooLong { len: usize, max_positions: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already run on this graph")]
    BackwardAlreadyRun,

    #[error("empty {what}")]
    EmptyInput { what: &'static str },

    #[error("unknown tag {tag:?}")]
    UnknownTag { tag: String },

    #[error("unknown label {label:?}")]
    UnknownLabel { label: String },

    #[error("max_len {max_len} too small: need at least {min}")]
    MaxLenTooSmall { max_len: usize, min: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid spans: {0}")]
    InvalidSpans(String),

    #[error("metric input: {0}")]
    MetricInput(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: u64, batch: usize },

    #[error("warmup_steps {warmup} must be less than total_steps {total}")]
    WarmupExceedsTotal { warmup: u64, total: u64 },

    #[error("split requires at least 2 records, got {n}")]
    SplitTooSmall { n: usize },

    #[error("split fraction {fraction} must lie in (0, 1)")]
    BadFraction { fraction: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
