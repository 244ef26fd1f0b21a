//! Prototype classification, fine-tuning, base training and episodic
//! evaluation.

mod classify;
mod eval;
mod features;
mod finetune;
mod train;

pub use classify::{assign, calibrate, prototype_classify, prototypes, transductive_refine, Calibration, Metric, Prediction, Refinement};
pub use eval::{episode_for, evaluate, evaluate_features, EvalResult, Method, Protocol};
pub use features::{extract_features, Extraction};
pub use finetune::{finetune, predict, FinetuneConfig};
pub use train::{train_base, train_step, EpochLog, StepOutcome, TrainConfig};
