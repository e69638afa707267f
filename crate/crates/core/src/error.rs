use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("input `{0}` is not bound")]
    MissingInput(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed JSON at byte {offset}: {message}")]
    MalformedJson { offset: usize, message: String },

    #[error("no usable records after filtering")]
    NoUsableRecords,

    #[error("unit too small to split: {0} records")]
    UnitTooSmall(usize),

    #[error("question {0} has an all-zero Q-matrix row")]
    EmptyQRow(usize),

    #[error("array `{0}` does not match the expected layout")]
    LayoutMismatch(String),

    #[error("classifier already stripped")]
    AlreadyStripped,

    #[error("class {0} has no samples")]
    EmptyClass(u8),

    #[error("AUC is undefined when only one class is present")]
    UndefinedAuc,

    #[error("BWT needs at least two tasks, got {0}")]
    TooFewTasks(usize),

    #[error("matrix entry M[{row}][{col}] is missing")]
    MissingEntry { row: usize, col: usize },

    #[error(
        "training diverged at iteration {iteration}: query loss {loss:.4} stayed above 10x the initial {initial:.4}"
    )]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("bad checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
