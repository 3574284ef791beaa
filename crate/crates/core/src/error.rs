use thiserror::Error;

use crate::io::IoError;
use crate::optimizer::OptimReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch for {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty operand: {0}")]
    EmptyOperand(&'static str),

    #[error("unliftable depth: {0}")]
    UnliftableDepth(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("optimization diverged at iteration {iteration}: loss {loss:e} exceeds 10x initial {initial:e}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        report: Box<OptimReport>,
    },

    #[error(transparent)]
    Io(#[from] IoError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
