use thiserror::Error;

pub type Result<T, E = TamError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TamError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("non-finite gradient in parameter `{name}`")]
    NanGradient { name: String },

    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint mismatch at tensor `{name}`: {detail}")]
    CheckpointMismatch { name: String, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TamError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TamError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        TamError::Config(detail.into())
    }
}
