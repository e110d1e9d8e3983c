use thiserror::Error;

/// Failures raised by the tensor/tape layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} is not a registered parameter on this tape")]
    NotAParam(usize),
    #[error("variable belongs to a different tape")]
    ForeignTape,
    #[error("backward already ran on this tape; rebuild the graph")]
    TapeConsumed,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Crate-level error for model, training and benchmark code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence too long: {len} tokens exceeds the limit of {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("pretraining failed: greedy fidelity {fidelity:.1}% < {required:.1}% after {epochs} epochs")]
    PretrainingFailed { fidelity: f64, required: f64, epochs: usize },
    #[error("non-finite loss at step {step} ({point}): {detail}")]
    NonFiniteLoss { step: usize, point: &'static str, detail: String },
    #[error("world generation: {0}")]
    World(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
