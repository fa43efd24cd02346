use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum KronError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("input slot {slot} is not bound")]
    UnboundInput { slot: usize },

    #[error("node index {index} out of range (tape has {len} nodes)")]
    NodeOutOfRange { index: usize, len: usize },

    #[error("tape has not been evaluated")]
    NotEvaluated,

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("activation slot `{label}` is not twice continuously differentiable")]
    NonSmoothActivation { label: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("block construction needs {needed} neurons per layer, cap is {cap}")]
    BlockTooLarge { needed: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("zero reference norm")]
    ZeroNorm,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KronError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(KronError::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
