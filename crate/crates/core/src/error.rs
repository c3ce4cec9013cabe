use thiserror::Error;

/// Errors raised by the numeric and model routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("row {row} has no permitted entries (every score is masked)")]
    EmptyRow { row: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("neighbour index {index} out of range for {n} tokens")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("k = {k} out of range (allowed 1..={max})")]
    KOutOfRange { k: usize, max: usize },
    #[error("arithmetic overflow evaluating {0}")]
    Overflow(&'static str),
    #[error("non-finite loss {0}")]
    Diverged(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
