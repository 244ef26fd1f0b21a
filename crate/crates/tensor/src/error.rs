use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape was already consumed by a backward pass")]
    TapeConsumed,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
