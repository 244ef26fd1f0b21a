use flor_tensor::{Scalar, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use super::classify::prototypes;
use super::features::{extract_features, Extraction};
use crate::backbone::{Deltas, ForwardOpts, HeadKind, Model, NormMode};
use crate::data::{Dataset, Episode};
use crate::error::{invalid, CoreError, Result};
use crate::optim::{Optimizer, Sgd};
use crate::params::{collect_grads, Ctx, Group, ParamKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Learning rate of the head and of δ.
    pub lr: f64,
    pub momentum: f64,
    /// Backbone learning rate as a multiple of `lr`.
    pub lr_backbone_ratio: f64,
    /// Leading stages kept fixed (their batch norms stay in eval mode).
    pub freeze_depth: usize,
    pub steps: usize,
    pub learnable_delta: bool,
    /// Temperature of the cosine head.
    pub head_scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, lr_backbone_ratio: 1.0, freeze_depth: 0, steps: 20, learnable_delta: true, head_scale: 10.0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, stages: usize) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.freeze_depth > stages {
            return bad(format!("freeze_depth {} exceeds {stages} stages", self.freeze_depth));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("finetune lr {}", self.lr));
        }
        if !(self.lr_backbone_ratio >= 0.0 && self.lr_backbone_ratio.is_finite()) {
            return bad(format!("lr_backbone_ratio {}", self.lr_backbone_ratio));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.head_scale > 0.0 && self.head_scale.is_finite()) {
            return bad(format!("head_scale {}", self.head_scale));
        }
        Ok(())
    }
}

fn diverged(e: CoreError, step: usize) -> CoreError {
    match e {
        CoreError::Tensor(TensorError::NonFinite { .. }) => CoreError::Divergence { phase: "finetune", step },
        e => e,
    }
}

/// Adapt a copy of `model` to the support set of `ep`: a cosine head
/// initialised at the class prototypes, full-batch SGD with momentum, and
/// (for FLoR models) every δ made learnable at its Beta mean.
pub fn finetune<T: Scalar>(model: &Model<T>, d: &Dataset, ep: &Episode, cfg: &FinetuneConfig) -> Result<Model<T>> {
    cfg.validate(model.num_stages())?;
    if ep.support.is_empty() {
        return Err(invalid("finetune", "empty support set"));
    }
    let mut m = model.clone();
    if cfg.learnable_delta && m.config.norm_mode == NormMode::Flor {
        m.make_mix_learnable();
    }
    let feats = extract_features(&m, d, Some(&ep.support), &Extraction::default())?;
    let protos = prototypes(&feats, &ep.support_labels)?;
    let dim = m.feature_dim();
    let w: Vec<T> = protos.iter().flatten().map(|&v| T::of(v)).collect();
    m.replace_head(HeadKind::Cosine { scale: cfg.head_scale }, Tensor::new([protos.len(), dim], w)?, None)?;

    let (mask, scale): (Vec<bool>, Vec<f64>) = m
        .store
        .iter()
        .map(|(_, p)| match (p.kind, p.group) {
            (ParamKind::Buffer, _) => (false, 0.0),
            (ParamKind::Mix, _) => (cfg.learnable_delta, 1.0),
            (ParamKind::Weight, Group::Head) => (true, 1.0),
            (ParamKind::Weight, Group::Stage(s)) => {
                (s >= cfg.freeze_depth && cfg.lr_backbone_ratio > 0.0, cfg.lr_backbone_ratio)
            }
        })
        .unzip();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, scale);
    let x = d.batch::<T>(&ep.support);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let run = |tape: &mut Tape<T>| -> Result<_> {
            let mut ctx = Ctx::with_mask(tape, &m.store, mask.clone());
            let xv = ctx.tape.leaf(x.clone(), false);
            let opts = ForwardOpts { training: true, deltas: Deltas::Expectation, frozen_stages: cfg.freeze_depth, displacements: None };
            let out = m.forward(&mut ctx, xv, opts)?;
            let logits = m.head_logits(&mut ctx, out.features, 0)?;
            let loss = ctx.tape.softmax_cross_entropy(logits, &ep.support_labels)?;
            Ok((loss, ctx.bindings(), ctx.take_updates()))
        };
        let (loss, bindings, updates) = run(&mut tape).map_err(|e| diverged(e, step))?;
        let mut grads = tape.backward(loss).map_err(|e| diverged(e.into(), step))?;
        let grads = collect_grads(&mut grads, &bindings);
        m.apply_stat_updates(&updates);
        opt.step(&mut m.store, &grads);
        m.clamp_mix();
    }
    Ok(m)
}

/// Head predictions (eval mode, head 0) for the given samples.
pub fn predict<T: Scalar>(model: &Model<T>, d: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &model.store);
        let xv = ctx.tape.leaf(d.batch::<T>(chunk), false);
        let out = model.forward(&mut ctx, xv, ForwardOpts::eval())?;
        let l = model.head_logits(&mut ctx, out.features, 0)?;
        let l = ctx.tape.value(l);
        let c = l.shape()[1];
        labels.extend(l.data().chunks(c).map(argmax));
    }
    Ok(labels)
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter().enumerate().fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
}
