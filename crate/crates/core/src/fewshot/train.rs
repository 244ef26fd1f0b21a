use flor_tensor::{Scalar, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::finetune::argmax;
use crate::backbone::{Deltas, ForwardOpts, Model, NormMode};
use crate::data::{Dataset, Split};
use crate::error::{invalid, CoreError, Result};
use crate::optim::{AdamW, Optimizer};
use crate::params::{collect_grads, Ctx};
use crate::probes::SamConfig;
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sam: Option<SamConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 400, batch_size: 64, lr: 1e-3, weight_decay: 1e-2, sam: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean loss at the displaced representations (SAM runs only).
    pub perturbed_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Loss of the unperturbed forward pass.
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub perturbed_loss: Option<f64>,
    /// Mean per-sample displacement norm at each tap (zero where unperturbed).
    pub displacement_norms: Vec<f64>,
}

fn diverged(e: CoreError, phase: &'static str, step: usize) -> CoreError {
    match e {
        CoreError::Tensor(TensorError::NonFinite { .. }) => CoreError::Divergence { phase, step },
        e => e,
    }
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits.data().chunks(c).zip(labels).filter(|(r, &l)| argmax(r) == l).count()
}

/// One optimisation step on a batch. With `sam`, the loss is re-evaluated
/// with each selected tap displaced along its own gradient (a constant
/// direction from the first pass) and the parameters follow the gradient of
/// that perturbed loss; the second pass replays the first pass's δ draws and
/// batch statistics from the first pass update the running estimates.
pub fn train_step<T: Scalar, O: Optimizer<T>>(
    model: &mut Model<T>,
    opt: &mut O,
    x: &Tensor<T>,
    labels: &[usize],
    sam: Option<&SamConfig>,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepOutcome> {
    let two_branch = model.config.norm_mode == NormMode::TwoBranch;
    if let Some(cfg) = sam {
        if two_branch {
            return Err(CoreError::InvalidConfig("SAM on representations needs a single-stream model".into()));
        }
        cfg.validate(model.num_taps())?;
    }
    let m = &*model;
    let mut tape = Tape::new();
    let first = |tape: &mut Tape<T>, rng: &mut ChaCha8Rng| -> Result<_> {
        let mut ctx = Ctx::new(tape, &m.store);
        let xv = ctx.tape.leaf(x.clone(), false);
        let mut correct = 0;
        let (loss, taps, deltas) = if two_branch {
            let n = m.num_flor_layers();
            let mut losses = Vec::new();
            let mut keep = Vec::new();
            for (i, d) in [0.0, 1.0].into_iter().enumerate() {
                let list = vec![d; n];
                let out = m.forward(&mut ctx, xv, ForwardOpts::train(Deltas::Override(&list)))?;
                // running statistics follow the pure batch-norm stream only
                let u = ctx.take_updates();
                if i == 0 {
                    keep = u;
                }
                let l = m.head_logits(&mut ctx, out.features, i)?;
                correct += count_correct(ctx.tape.value(l), labels);
                losses.push(ctx.tape.softmax_cross_entropy(l, labels)?);
            }
            for u in keep {
                ctx.push_update(u);
            }
            (ctx.tape.add(losses[0], losses[1])?, Vec::new(), Vec::new())
        } else {
            let out = m.forward(&mut ctx, xv, ForwardOpts::train(Deltas::Sample(rng)))?;
            let l = m.head_logits(&mut ctx, out.features, 0)?;
            correct += count_correct(ctx.tape.value(l), labels);
            (ctx.tape.softmax_cross_entropy(l, labels)?, out.taps, out.deltas)
        };
        Ok((loss, taps, deltas, correct, ctx.bindings(), ctx.take_updates()))
    };
    let (loss, taps, deltas, correct, bindings, updates) = first(&mut tape, rng).map_err(|e| diverged(e, "train", step))?;
    let total = labels.len() * if two_branch { 2 } else { 1 };
    let loss_value = tape.value(loss).item().as_f64();
    if let Some(cfg) = sam {
        for &l in &cfg.layers {
            tape.retain_grad(taps[l]);
        }
    }
    let mut grads = tape.backward(loss).map_err(|e| diverged(e.into(), "train", step))?;
    let (param_grads, perturbed_loss, norms) = match sam {
        None => (collect_grads(&mut grads, &bindings), None, Vec::new()),
        Some(cfg) => {
            let mut disp: Vec<Option<Tensor<T>>> = vec![None; m.num_taps()];
            let mut norms = vec![0.0; m.num_taps()];
            if cfg.eta > 0.0 {
                for &l in &cfg.layers {
                    if let Some(g) = grads.get(taps[l]) {
                        let (d, n) = crate::probes::sam_displacement(g, cfg.eta)?;
                        disp[l] = Some(d);
                        norms[l] = n;
                    }
                }
            }
            let mut tape2 = Tape::new();
            let second = |tape: &mut Tape<T>| -> Result<_> {
                let mut ctx = Ctx::new(tape, &m.store);
                let xv = ctx.tape.leaf(x.clone(), false);
                let mut opts = ForwardOpts::train(Deltas::Override(&deltas));
                opts.displacements = Some(&disp);
                let out = m.forward(&mut ctx, xv, opts)?;
                let l = m.head_logits(&mut ctx, out.features, 0)?;
                Ok((ctx.tape.softmax_cross_entropy(l, labels)?, ctx.bindings()))
            };
            let (loss2, bindings2) = second(&mut tape2).map_err(|e| diverged(e, "train", step))?;
            let pl = tape2.value(loss2).item().as_f64();
            let mut grads2 = tape2.backward(loss2).map_err(|e| diverged(e.into(), "train", step))?;
            (collect_grads(&mut grads2, &bindings2), Some(pl), norms)
        }
    };
    model.apply_stat_updates(&updates);
    opt.step(&mut model.store, &param_grads);
    Ok(StepOutcome { loss: loss_value, correct, total, perturbed_loss, displacement_norms: norms })
}

/// Mini-batch training of `model` on a base split with AdamW. Epoch `e`
/// shuffles with `seed.split(e)`; a trailing batch of one sample is
/// dropped (batch statistics need two). `on_epoch` sees each log as it
/// is produced.
pub fn train_base<T: Scalar>(
    model: &mut Model<T>,
    d: &Dataset,
    cfg: &TrainConfig,
    seed: SeedStream,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if d.split != Split::Base {
        return Err(invalid("train_base", "dataset is not a base split"));
    }
    if cfg.batch_size < 2 {
        return Err(CoreError::InvalidConfig(format!("batch_size {} must be at least 2", cfg.batch_size)));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite() && cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()) {
        return Err(CoreError::InvalidConfig(format!("lr {} / weight_decay {}", cfg.lr, cfg.weight_decay)));
    }
    if let Some(h) = model.heads.iter().find(|h| h.classes != d.num_classes()) {
        return Err(invalid("train_base", format!("head has {} classes, dataset {}", h.classes, d.num_classes())));
    }
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = seed.split(epoch as u64).rng();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss, mut pl, mut seen, mut correct, mut total) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let x = d.batch::<T>(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| d.labels()[i]).collect();
            let out = train_step(model, &mut opt, &x, &labels, cfg.sam.as_ref(), &mut rng, step)?;
            step += 1;
            loss += out.loss * chunk.len() as f64;
            pl += out.perturbed_loss.unwrap_or(0.0) * chunk.len() as f64;
            seen += chunk.len();
            correct += out.correct;
            total += out.total;
        }
        let n = seen.max(1) as f64;
        let log = EpochLog {
            epoch,
            loss: loss / n,
            accuracy: correct as f64 / total.max(1) as f64,
            perturbed_loss: cfg.sam.as_ref().map(|_| pl / n),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
