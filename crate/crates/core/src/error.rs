use std::path::PathBuf;

use flor_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("mixing ratio {0} outside [0, 1]")]
    MixRatioOutOfRange(f64),
    #[error("Beta parameters must be positive, got a={a}, b={b}")]
    InvalidBeta { a: f64, b: f64 },
    #[error("expected {expected} per-layer mixing ratios, got {got}")]
    OverrideLength { expected: usize, got: usize },
    #[error("episode needs {needed} classes, dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} samples, episode needs {needed}")]
    InsufficientSamples { class: usize, needed: usize, available: usize },
    #[error("class {0} has no samples")]
    EmptyClass(String),
    #[error("non-finite loss during {phase} at step {step}")]
    Divergence { phase: &'static str, step: usize },
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("perturbation grid {grid:?} exceeds target {target:?}")]
    GridExceedsTarget { grid: (usize, usize), target: (usize, usize) },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> CoreError {
    CoreError::InvalidArgument { op, detail: detail.into() }
}
