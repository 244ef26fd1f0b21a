use flor_tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Deltas, ForwardOpts, Model};
use crate::error::{CoreError, Result};
use crate::fewshot::{train_step, StepOutcome};
use crate::optim::Optimizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamConfig {
    /// Displacement length at each selected representation.
    pub eta: f64,
    /// Tap indices (0-based, registry order) to displace.
    pub layers: Vec<usize>,
}

impl SamConfig {
    pub fn validate(&self, num_taps: usize) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("sam eta {} must be finite and >= 0", self.eta)));
        }
        let mut seen = vec![false; num_taps];
        for &l in &self.layers {
            match seen.get_mut(l) {
                None => return Err(CoreError::InvalidConfig(format!("sam layer {l} with {num_taps} representations"))),
                Some(true) => return Err(CoreError::InvalidConfig(format!("sam layer {l} listed twice"))),
                Some(s) => *s = true,
            }
        }
        Ok(())
    }
}

/// `η·g/‖g‖` per sample (leading axis), with zero rows where the gradient
/// vanishes, and the mean displacement norm over the batch.
pub fn sam_displacement<T: Scalar>(g: &Tensor<T>, eta: f64) -> Result<(Tensor<T>, f64)> {
    let b = g.shape()[0];
    let per = g.numel() / b.max(1);
    let mut data = Vec::with_capacity(g.numel());
    let mut norm_sum = 0.0;
    for row in g.data().chunks(per.max(1)) {
        let n = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if n > 0.0 {
            let d: Vec<T> = row.iter().map(|v| T::of(eta * v.as_f64() / n)).collect();
            norm_sum += d.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            data.extend(d);
        } else {
            data.extend(std::iter::repeat_n(T::zero(), row.len()));
        }
    }
    Ok((Tensor::new(g.shape().to_vec(), data)?, norm_sum / b.max(1) as f64))
}

/// One two-pass step of sharpness-aware training on representations.
pub fn sam_rep_step<T: Scalar, O: Optimizer<T>>(
    model: &mut Model<T>,
    opt: &mut O,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &SamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    train_step(model, opt, x, labels, Some(cfg), rng, 0)
}

/// Mean per-sample Euclidean distance between the two branch outputs of
/// every FLoR layer, with δ at its expectation.
pub fn rep_distance<T: Scalar>(model: &Model<T>, x: Tensor<T>, training: bool) -> Result<Vec<f64>> {
    if model.num_flor_layers() == 0 {
        return Err(CoreError::NotApplicable(format!("{:?} model has no two-branch layers", model.config.norm_mode)));
    }
    let opts = ForwardOpts { training, deltas: Deltas::Expectation, frozen_stages: 0, displacements: None };
    let pass = model.run(x, opts, false)?;
    let mut out = Vec::new();
    for (y1, y2) in pass.out.branches.iter().flatten() {
        let (a, b) = (pass.tape.value(*y1), pass.tape.value(*y2));
        let n = a.shape()[0];
        let per = a.numel() / n.max(1);
        let total: f64 = a
            .data()
            .chunks(per.max(1))
            .zip(b.data().chunks(per.max(1)))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2)).sum::<f64>().sqrt())
            .sum();
        out.push(total / n.max(1) as f64);
    }
    Ok(out)
}
