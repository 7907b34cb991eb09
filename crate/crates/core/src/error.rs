use thiserror::Error;

/// Errors raised by tensor operations, model construction and I/O.
#[derive(Debug, Error)]
pub enum TprError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("routing graph contains a cycle at node {0}")]
    Cycle(usize),

    #[error("budget ledger is empty; no gate recorded any cost")]
    EmptyLedger,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TprError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TprError {
    TprError::Shape {
        op,
        detail: detail.into(),
    }
}
