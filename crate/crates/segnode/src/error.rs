use thiserror::Error;

use crate::solver::SolveStats;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("tensors in `{0}` belong to different tapes")]
    TapeMismatch(&'static str),

    #[error("tape is frozen; no further operations can be recorded")]
    TapeFrozen,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor was not produced on this tape")]
    NotOnTape,

    #[error("non-finite value in {context} at t = {t}")]
    NonFinite { context: String, t: f64 },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("function evaluation budget exceeded ({nfe} > {max_nfe})")]
    NfeBudget {
        nfe: usize,
        max_nfe: usize,
        partial: SolveStats,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u32, classes: usize },

    #[error("tensor format: {0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Command-line misuse; mapped to exit code 2.
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
