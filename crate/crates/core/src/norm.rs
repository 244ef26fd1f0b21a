//! Batch, instance and layer normalization, and the interpolating layer that
//! mixes two of them.

use flor_tensor::{Grouping, Scalar, Tensor, Var, View3};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::params::{Ctx, Group, ParamId, ParamKind, ParamStore, StatUpdate};

pub const EPS: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Instance,
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Running {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
}

/// Handles to one normalization's affine parameters and, for batch
/// normalization, its running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub channels: usize,
    pub running: Option<Running>,
}

impl NormParams {
    /// Register `γ = 1`, `β = 0` (and running mean 0, variance 1 for batch
    /// normalization) under `prefix`.
    pub fn create<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, kind: NormKind, channels: usize, group: Group) -> Self {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones([channels]), ParamKind::Weight, group);
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros([channels]), ParamKind::Weight, group);
        let running = (kind == NormKind::Batch).then(|| Running {
            mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros([channels]), ParamKind::Buffer, group),
            var: store.add(format!("{prefix}.running_var"), Tensor::ones([channels]), ParamKind::Buffer, group),
            momentum: MOMENTUM,
        });
        Self { gamma, beta, eps: EPS, channels, running }
    }
}

fn check_channels<T: Scalar>(ctx: &Ctx<T>, op: &'static str, x: Var, axis: usize, p: &NormParams) -> Result<()> {
    let shape = ctx.tape.shape(x);
    match shape.get(axis) {
        Some(&c) if c == p.channels && shape.len() >= 2 => Ok(()),
        _ => Err(invalid(op, format!("input {shape:?} does not have {} channels on axis {axis}", p.channels))),
    }
}

fn affine<T: Scalar>(ctx: &mut Ctx<T>, xhat: Var, p: &NormParams, view: View3) -> Result<Var> {
    let g = ctx.param(p.gamma);
    let b = ctx.param(p.beta);
    let y = ctx.tape.mul_channel(xhat, g, view)?;
    Ok(ctx.tape.add_channel(y, b, view)?)
}

/// Batch normalization of `[b, c, ...]`. Training mode standardizes with the
/// batch statistics of each channel and queues a running-statistics update;
/// eval mode uses the running statistics.
pub fn batch_norm<T: Scalar>(ctx: &mut Ctx<T>, x: Var, p: &NormParams, training: bool) -> Result<Var> {
    check_channels(ctx, "batch_norm", x, 1, p)?;
    let shape = ctx.tape.shape(x).to_vec();
    let view = View3 { outer: shape[0], channels: shape[1], inner: shape[2..].iter().product() };
    if training {
        let (xhat, stats) = ctx.tape.standardize(x, view, Grouping::PerChannel, p.eps)?;
        if let Some(r) = p.running {
            let n = stats.count as f64;
            let correction = T::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            ctx.push_update(StatUpdate {
                mean: r.mean,
                var: r.var,
                batch_mean: stats.mean,
                batch_var: stats.var.iter().map(|&v| v * correction).collect(),
                momentum: r.momentum,
            });
        }
        affine(ctx, xhat, p, view)
    } else {
        let r = p.running.ok_or_else(|| invalid("batch_norm", "eval mode needs running statistics"))?;
        let store = ctx.store();
        let neg_mean = store.value(r.mean).map(|m| -m);
        let eps = T::of(p.eps);
        let inv_std = store.value(r.var).map(|v| T::one() / (v + eps).sqrt());
        let (nm, is) = (ctx.tape.constant(neg_mean), ctx.tape.constant(inv_std));
        let centered = ctx.tape.add_channel(x, nm, view)?;
        let xhat = ctx.tape.mul_channel(centered, is, view)?;
        affine(ctx, xhat, p, view)
    }
}

/// Instance normalization of `[b, c, ...]`: each (sample, channel) slab is
/// standardized over its spatial extent.
pub fn instance_norm<T: Scalar>(ctx: &mut Ctx<T>, x: Var, p: &NormParams) -> Result<Var> {
    check_channels(ctx, "instance_norm", x, 1, p)?;
    let shape = ctx.tape.shape(x).to_vec();
    let view = View3 { outer: shape[0], channels: shape[1], inner: shape[2..].iter().product() };
    let (xhat, _) = ctx.tape.standardize(x, view, Grouping::PerSlab, p.eps)?;
    affine(ctx, xhat, p, view)
}

/// Layer normalization of `[..., c]`: each token is standardized over its
/// channels.
pub fn layer_norm<T: Scalar>(ctx: &mut Ctx<T>, x: Var, p: &NormParams) -> Result<Var> {
    let rank = ctx.tape.shape(x).len();
    check_channels(ctx, "layer_norm", x, rank.saturating_sub(1), p)?;
    let tokens = ctx.tape.value(x).numel() / p.channels;
    let (xhat, _) = ctx.tape.standardize(
        x,
        View3 { outer: tokens, channels: 1, inner: p.channels },
        Grouping::PerSlab,
        p.eps,
    )?;
    affine(ctx, xhat, p, View3 { outer: tokens, channels: p.channels, inner: 1 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub kind: NormKind,
    pub params: NormParams,
}

impl Branch {
    pub fn create<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, kind: NormKind, channels: usize, group: Group) -> Self {
        Self { kind, params: NormParams::create(store, prefix, kind, channels, group) }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        match self.kind {
            NormKind::Batch => batch_norm(ctx, x, &self.params, training),
            NormKind::Instance => instance_norm(ctx, x, &self.params),
            NormKind::Layer => layer_norm(ctx, x, &self.params),
        }
    }
}

// ---- mixing ratio ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    BetaSampled,
    Fixed,
    Learnable,
}

/// How a mixing ratio δ is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRatioPolicy {
    pub mode: MixMode,
    pub a: f64,
    pub b: f64,
    pub fixed_value: f64,
    pub learnable_value: f64,
}

impl Default for MixRatioPolicy {
    fn default() -> Self {
        Self::beta(0.01, 0.01)
    }
}

impl MixRatioPolicy {
    pub fn beta(a: f64, b: f64) -> Self {
        Self { mode: MixMode::BetaSampled, a, b, fixed_value: 0.5, learnable_value: a / (a + b) }
    }

    pub fn fixed(value: f64) -> Self {
        Self { mode: MixMode::Fixed, fixed_value: value, ..Self::default() }
    }

    /// Learnable ratio initialized at the Beta mean `a / (a + b)`.
    pub fn learnable(a: f64, b: f64) -> Self {
        Self { mode: MixMode::Learnable, ..Self::beta(a, b) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(CoreError::InvalidBeta { a: self.a, b: self.b });
        }
        if self.mode == MixMode::Fixed {
            check_ratio(self.fixed_value)?;
        }
        Ok(())
    }

    pub fn beta_mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    /// The deterministic ratio used when nothing is sampled: the Beta mean,
    /// the fixed value, or the clamped learnable value.
    pub fn expectation(&self) -> f64 {
        match self.mode {
            MixMode::BetaSampled => self.beta_mean(),
            MixMode::Fixed => self.fixed_value,
            MixMode::Learnable => self.learnable_value.clamp(0.0, 1.0),
        }
    }
}

pub fn check_ratio(delta: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&delta) {
        Ok(delta)
    } else {
        Err(CoreError::MixRatioOutOfRange(delta))
    }
}

/// Draw `log G` for `G ~ Gamma(a, 1)` via `G = G' · U^(1/a)`, `G' ~ Gamma(a + 1)`,
/// which stays finite for tiny `a` where `G` itself underflows.
fn log_gamma_draw<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(a + 1.0, 1.0).expect("shape is positive").sample(rng);
    let u = 1.0 - rng.random::<f64>();
    g.ln() + u.ln() / a
}

/// One Beta(a, b) draw computed from the log-ratio of two gamma draws.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(CoreError::InvalidBeta { a, b });
    }
    let d = log_gamma_draw(b, rng) - log_gamma_draw(a, rng);
    // δ = 1 / (1 + e^d), evaluated on the side that cannot overflow
    let delta = if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    };
    Ok(delta.clamp(0.0, 1.0))
}

/// Produce δ under `policy`. Only the Beta mode touches `rng`.
pub fn sample_mix_ratio<R: Rng + ?Sized>(policy: &MixRatioPolicy, rng: Option<&mut R>) -> Result<f64> {
    policy.validate()?;
    match policy.mode {
        MixMode::BetaSampled => {
            let rng = rng.ok_or_else(|| invalid("sample_mix_ratio", "Beta mode needs a random stream"))?;
            sample_beta(policy.a, policy.b, rng)
        }
        MixMode::Fixed => Ok(policy.fixed_value),
        MixMode::Learnable => Ok(policy.learnable_value.clamp(0.0, 1.0)),
    }
}

// ---- interpolating layer ---------------------------------------------------------

/// `(1 − δ)·branch1(x) + δ·branch2(x)`. With `cls_only`, `x` is `[b, t, c]`,
/// branch2 sees only token 0 and the other tokens take branch1 unmixed.
#[derive(Clone, Debug, PartialEq)]
pub struct FlorLayer {
    pub branch1: Branch,
    pub branch2: Branch,
    pub policy: MixRatioPolicy,
    /// Scalar parameter holding δ once the layer is made learnable.
    pub delta: Option<ParamId>,
    pub cls_only: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct FlorOutput {
    pub out: Var,
    /// Branch outputs at the mixed positions (the whole tensor, or the CLS
    /// token in the token variant).
    pub y1: Var,
    pub y2: Var,
}

impl FlorLayer {
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kinds: (NormKind, NormKind),
        channels: usize,
        policy: MixRatioPolicy,
        cls_only: bool,
        group: Group,
    ) -> Result<Self> {
        if kinds.0 == kinds.1 {
            return Err(CoreError::InvalidConfig(format!("both branches are {:?}", kinds.0)));
        }
        policy.validate()?;
        Ok(Self {
            branch1: Branch::create(store, &format!("{prefix}.norm1"), kinds.0, channels, group),
            branch2: Branch::create(store, &format!("{prefix}.norm2"), kinds.1, channels, group),
            policy,
            delta: None,
            cls_only,
        })
    }

    /// Register a learnable δ initialized at the Beta mean.
    pub fn make_learnable<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: &str, group: Group) -> ParamId {
        let init = self.policy.beta_mean();
        self.policy = MixRatioPolicy { mode: MixMode::Learnable, learnable_value: init, ..self.policy };
        let id = store.add(name, Tensor::from_f64([1], &[init]).expect("one element"), ParamKind::Mix, group);
        self.delta = Some(id);
        id
    }
}

/// Apply a FLoR layer with δ given as a one-element tape value.
pub fn flor_forward_var<T: Scalar>(ctx: &mut Ctx<T>, x: Var, layer: &FlorLayer, delta: Var, training: bool) -> Result<FlorOutput> {
    if ctx.tape.value(delta).numel() != 1 {
        return Err(invalid("flor_forward", "δ must be a single value"));
    }
    check_ratio(ctx.tape.value(delta).item().as_f64())?;
    if !layer.cls_only {
        let y1 = layer.branch1.forward(ctx, x, training)?;
        let y2 = layer.branch2.forward(ctx, x, training)?;
        let out = ctx.tape.lerp(y1, y2, delta)?;
        return Ok(FlorOutput { out, y1, y2 });
    }
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(invalid("flor_forward", format!("token variant needs [b, t, c], got {shape:?}")));
    }
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let all = layer.branch1.forward(ctx, x, training)?;
    let cls_in = ctx.tape.narrow(x, 1, 0, 1)?;
    let cls_in = ctx.tape.reshape(cls_in, [b, c])?;
    let y2 = layer.branch2.forward(ctx, cls_in, training)?;
    let y1 = ctx.tape.narrow(all, 1, 0, 1)?;
    let y1 = ctx.tape.reshape(y1, [b, c])?;
    let mixed = ctx.tape.lerp(y1, y2, delta)?;
    let mixed = ctx.tape.reshape(mixed, [b, 1, c])?;
    let out = if t == 1 {
        mixed
    } else {
        let rest = ctx.tape.narrow(all, 1, 1, t - 1)?;
        ctx.tape.concat(&[mixed, rest], 1)?
    };
    Ok(FlorOutput { out, y1, y2 })
}

/// Apply a FLoR layer at a fixed δ.
pub fn flor_forward<T: Scalar>(ctx: &mut Ctx<T>, x: Var, layer: &FlorLayer, delta: f64, training: bool) -> Result<FlorOutput> {
    check_ratio(delta)?;
    let d = ctx.tape.constant(Tensor::scalar(T::of(delta)));
    flor_forward_var(ctx, x, layer, d, training)
}
