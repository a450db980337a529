//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward already ran on this graph; call zero_grads before running it again")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schedule step {step} out of range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("checkpoint key sets differ; only in a: {only_a:?}, only in b: {only_b:?}")]
    KeySetMismatch {
        only_a: Vec<String>,
        only_b: Vec<String>,
    },

    #[error("checkpoint shapes differ for key {key}: {a:?} vs {b:?}")]
    EntryShapeMismatch {
        key: String,
        a: Vec<usize>,
        b: Vec<usize>,
    },

    #[error("frozen key {0} differs between checkpoints")]
    FrozenKeyDivergence(String),

    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: u64, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training aborted at step {step} (batch {batch}): {source}")]
    TrainAborted {
        step: usize,
        batch: String,
        #[source]
        source: Box<Error>,
    },

    #[error("sequence length {len} exceeds budget {budget}")]
    Overlength { len: usize, budget: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
