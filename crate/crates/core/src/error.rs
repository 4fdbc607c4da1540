use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GediError>;

/// Errors raised by the models, decoders, trainers and file readers.
#[derive(Debug, Error)]
pub enum GediError {
    #[error("class id {class} out of range (model has {classes} classes)")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("token id {token} out of range (vocab size {vocab})")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("vocab mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite numerical input: {0}")]
    NumericalInput(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("pass-count invariant violated: {0}")]
    InvariantViolation(String),

    #[error("no false pairing available: class set has a single class")]
    NoFalseClass,

    #[error("corpus too small: {n} records (need at least {min})")]
    CorpusTooSmall { n: usize, min: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GediError {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        GediError::Parse { line, msg: msg.into() }
    }

    /// True for failures caused by non-finite or degenerate numbers rather than
    /// bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GediError::NumericalInput(_) | GediError::DegenerateDistribution(_) | GediError::Divergence { .. }
        )
    }
}
