//! Low-frequency perturbation sweeps, sharpness-aware training on
//! representations, branch distances, δ sweeps and fine-tuning grids.

mod noise;
mod sam;
mod sweeps;

pub use noise::{bilinear_upsample, low_freq_noise, PerturbationSpec, Space};
pub use sam::{rep_distance, sam_displacement, sam_rep_step, SamConfig};
pub use sweeps::{delta_sweep, finetune_grid, perturb_sweep, GridResult, SweepCurve};
