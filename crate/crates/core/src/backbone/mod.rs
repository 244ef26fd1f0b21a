//! Toy residual CNN and ViT feature extractors with pluggable normalization.

mod config;

pub use config::{BackboneConfig, BackboneKind, NormMode, StageSpec};

use flor_tensor::{Scalar, Tape, Tensor, Var, View3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, CoreError, Result};
use crate::norm::{self, flor_forward_var, Branch, FlorLayer, MixMode, NormKind};
use crate::params::{Ctx, Group, ParamId, ParamKind, ParamStore, StatUpdate};

#[derive(Clone, Debug, PartialEq)]
pub enum NormLayer {
    Plain(Branch),
    Flor(FlorLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormSlot {
    pub name: String,
    pub stage: usize,
    pub layer: NormLayer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadKind {
    /// `x · W + b`, `W: [d, classes]`.
    Linear,
    /// `scale · cos(x, w_c)`, `W: [classes, d]`.
    Cosine { scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv1: ParamId,
    conv2: ParamId,
    shortcut: Option<ParamId>,
    stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct VitBlock {
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    Cnn { stem: ParamId, stages: Vec<Vec<Block>> },
    Vit { patch_w: ParamId, patch_b: ParamId, cls: ParamId, pos: ParamId, blocks: Vec<VitBlock> },
}

/// Where each FLoR layer's δ comes from in one forward pass.
pub enum Deltas<'a> {
    /// Policy expectation (learnable layers use their current value).
    Expectation,
    /// One draw per layer from its policy (learnable layers use their value).
    Sample(&'a mut ChaCha8Rng),
    /// One fixed value per FLoR layer, in tap order.
    Override(&'a [f64]),
}

pub struct ForwardOpts<'a, T> {
    pub training: bool,
    pub deltas: Deltas<'a>,
    /// Leading stages run batch normalization in eval mode.
    pub frozen_stages: usize,
    /// Additive displacement per tap, applied to the normalization output.
    pub displacements: Option<&'a [Option<Tensor<T>>]>,
}

impl<'a, T> ForwardOpts<'a, T> {
    pub fn eval() -> Self {
        Self { training: false, deltas: Deltas::Expectation, frozen_stages: 0, displacements: None }
    }

    pub fn train(deltas: Deltas<'a>) -> Self {
        Self { training: true, deltas, frozen_stages: 0, displacements: None }
    }

    pub fn with_deltas(mut self, deltas: Deltas<'a>) -> Self {
        self.deltas = deltas;
        self
    }
}

pub struct ForwardOut {
    /// `[b, d]` pooled features.
    pub features: Var,
    /// Output of every normalization layer, in registry order.
    pub taps: Vec<Var>,
    /// Branch outputs of each FLoR layer (`None` for plain layers).
    pub branches: Vec<Option<(Var, Var)>>,
    /// δ used by each FLoR layer.
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: BackboneConfig,
    pub store: ParamStore<T>,
    pub norms: Vec<NormSlot>,
    pub heads: Vec<Head>,
    arch: Arch,
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("matching length")
}

fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("matching length")
}

struct Builder<'c, T: Scalar> {
    store: ParamStore<T>,
    norms: Vec<NormSlot>,
    config: &'c BackboneConfig,
    rng: &'c mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: String, out: usize, inp: usize, k: usize, stage: usize) -> ParamId {
        let std = (2.0 / (inp * k * k) as f64).sqrt();
        let w = normal_tensor(self.rng, &[out, inp, k, k], std);
        self.store.add(name, w, ParamKind::Weight, Group::Stage(stage))
    }

    fn dense(&mut self, name: &str, inp: usize, out: usize, stage: usize) -> (ParamId, ParamId) {
        let w = normal_tensor(self.rng, &[inp, out], 0.02);
        let w = self.store.add(format!("{name}.weight"), w, ParamKind::Weight, Group::Stage(stage));
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros([out]), ParamKind::Weight, Group::Stage(stage));
        (w, b)
    }

    fn norm(&mut self, name: String, channels: usize, stage: usize, spatial: bool) -> Result<()> {
        let group = Group::Stage(stage);
        let cfg = self.config;
        let layer = match (cfg.norm_mode, spatial) {
            (NormMode::Bn, _) => NormLayer::Plain(Branch::create(&mut self.store, &name, NormKind::Batch, channels, group)),
            (NormMode::In, _) => NormLayer::Plain(Branch::create(&mut self.store, &name, NormKind::Instance, channels, group)),
            (NormMode::Ln, _) => NormLayer::Plain(Branch::create(&mut self.store, &name, NormKind::Layer, channels, group)),
            (NormMode::Flor | NormMode::TwoBranch, true) => NormLayer::Flor(FlorLayer::create(
                &mut self.store,
                &name,
                (NormKind::Batch, NormKind::Instance),
                channels,
                cfg.mix_policy,
                false,
                group,
            )?),
            (NormMode::Flor | NormMode::TwoBranch, false) => NormLayer::Flor(FlorLayer::create(
                &mut self.store,
                &name,
                (NormKind::Layer, NormKind::Batch),
                channels,
                cfg.mix_policy,
                true,
                group,
            )?),
        };
        self.norms.push(NormSlot { name, stage, layer });
        Ok(())
    }
}

/// Build a model with `num_classes` outputs per head; deterministic in `rng`.
pub fn build_model<T: Scalar>(config: &BackboneConfig, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Model<T>> {
    config.validate()?;
    if num_classes == 0 {
        return Err(CoreError::InvalidConfig("num_classes must be positive".into()));
    }
    let mut b = Builder { store: ParamStore::new(), norms: Vec::new(), config, rng };
    let [in_c, h, w] = config.input;
    let (arch, feat_dim) = match config.kind {
        BackboneKind::Cnn => {
            let c0 = config.stages[0].channels;
            let stem = b.conv("stem.conv".into(), c0, in_c, 3, 0);
            b.norm("stem.norm".into(), c0, 0, true)?;
            let mut prev = c0;
            let mut stages = Vec::new();
            for (si, st) in config.stages.iter().enumerate() {
                let mut blocks = Vec::new();
                for bi in 0..st.blocks {
                    let stride = if bi == 0 { st.stride } else { 1 };
                    let p = format!("stage{}.block{bi}", si + 1);
                    let conv1 = b.conv(format!("{p}.conv1"), st.channels, prev, 3, si);
                    b.norm(format!("{p}.norm1"), st.channels, si, true)?;
                    let conv2 = b.conv(format!("{p}.conv2"), st.channels, st.channels, 3, si);
                    b.norm(format!("{p}.norm2"), st.channels, si, true)?;
                    let shortcut = if stride != 1 || prev != st.channels {
                        let s = b.conv(format!("{p}.shortcut"), st.channels, prev, 1, si);
                        b.norm(format!("{p}.shortcut_norm"), st.channels, si, true)?;
                        Some(s)
                    } else {
                        None
                    };
                    blocks.push(Block { conv1, conv2, shortcut, stride });
                    prev = st.channels;
                }
                stages.push(blocks);
            }
            (Arch::Cnn { stem, stages }, prev)
        }
        BackboneKind::Vit => {
            let e = config.embed_dim;
            let tokens = (h / config.patch) * (w / config.patch) + 1;
            let patch_w = b.conv("patch.weight".into(), e, in_c, config.patch, 0);
            let patch_b = b.store.add("patch.bias", Tensor::zeros([e]), ParamKind::Weight, Group::Stage(0));
            let cls = normal_tensor(b.rng, &[1, 1, e], 0.02);
            let cls = b.store.add("cls_token", cls, ParamKind::Weight, Group::Stage(0));
            let pos = normal_tensor(b.rng, &[1, tokens, e], 0.02);
            let pos = b.store.add("pos_embed", pos, ParamKind::Weight, Group::Stage(0));
            let mut blocks = Vec::new();
            let m = e * config.mlp_ratio;
            for i in 0..config.depth {
                let p = format!("block{}", i + 1);
                b.norm(format!("{p}.norm1"), e, i, false)?;
                let (qkv_w, qkv_b) = b.dense(&format!("{p}.qkv"), e, 3 * e, i);
                let (proj_w, proj_b) = b.dense(&format!("{p}.proj"), e, e, i);
                b.norm(format!("{p}.norm2"), e, i, false)?;
                let (fc1_w, fc1_b) = b.dense(&format!("{p}.fc1"), e, m, i);
                let (fc2_w, fc2_b) = b.dense(&format!("{p}.fc2"), m, e, i);
                blocks.push(VitBlock { qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b });
            }
            b.norm("final_norm".into(), e, config.depth - 1, false)?;
            (Arch::Vit { patch_w, patch_b, cls, pos, blocks }, e)
        }
    };
    let n_heads = if config.norm_mode == NormMode::TwoBranch { 2 } else { 1 };
    let mut heads = Vec::new();
    for i in 0..n_heads {
        let bound = 1.0 / (feat_dim as f64).sqrt();
        let wt = uniform_tensor(b.rng, &[feat_dim, num_classes], bound);
        let weight = b.store.add(format!("head{i}.weight"), wt, ParamKind::Weight, Group::Head);
        let bias = b.store.add(format!("head{i}.bias"), Tensor::zeros([num_classes]), ParamKind::Weight, Group::Head);
        heads.push(Head { kind: HeadKind::Linear, weight, bias: Some(bias), classes: num_classes });
    }
    Ok(Model { config: config.clone(), store: b.store, norms: b.norms, heads, arch })
}

struct PassState<'a, 'o, T> {
    opts: &'o mut ForwardOpts<'a, T>,
    taps: Vec<Var>,
    branches: Vec<Option<(Var, Var)>>,
    deltas: Vec<f64>,
    flor_seen: usize,
}

impl<T: Scalar> Model<T> {
    pub fn num_taps(&self) -> usize {
        self.norms.len()
    }

    pub fn num_flor_layers(&self) -> usize {
        self.norms.iter().filter(|n| matches!(n.layer, NormLayer::Flor(_))).count()
    }

    pub fn num_stages(&self) -> usize {
        self.config.num_stages()
    }

    pub fn feature_dim(&self) -> usize {
        match &self.arch {
            Arch::Cnn { .. } => self.config.stages.last().map_or(0, |s| s.channels),
            Arch::Vit { .. } => self.config.embed_dim,
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Analytic shape of each tap for a batch of `b`, from the config alone.
    pub fn tap_shapes(&self, b: usize) -> Vec<Vec<usize>> {
        let [_, h, w] = self.config.input;
        match &self.arch {
            Arch::Cnn { stages, .. } => {
                let mut shapes = vec![vec![b, self.config.stages[0].channels, h, w]];
                let (mut h, mut w) = (h, w);
                for (st, blocks) in self.config.stages.iter().zip(stages) {
                    for blk in blocks {
                        h = (h - 1) / blk.stride + 1;
                        w = (w - 1) / blk.stride + 1;
                        let s = vec![b, st.channels, h, w];
                        let n = if blk.shortcut.is_some() { 3 } else { 2 };
                        shapes.extend(std::iter::repeat_n(s, n));
                    }
                }
                shapes
            }
            Arch::Vit { .. } => {
                let t = (h / self.config.patch) * (w / self.config.patch) + 1;
                vec![vec![b, t, self.config.embed_dim]; self.norms.len()]
            }
        }
    }

    /// Last normalization output on the main path: the final residual
    /// branch for CNNs, the closing norm for ViTs.
    pub fn final_tap(&self) -> Result<usize> {
        self.norms
            .iter()
            .rposition(|n| !n.name.ends_with("shortcut_norm"))
            .ok_or_else(|| invalid("final_tap", "model has no normalization layers"))
    }

    /// Switch every FLoR layer to a learnable δ at the Beta mean. Returns the
    /// new parameter ids (already-learnable layers are left alone).
    pub fn make_mix_learnable(&mut self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for slot in &mut self.norms {
            if let NormLayer::Flor(layer) = &mut slot.layer {
                if layer.delta.is_none() {
                    let id = layer.make_learnable(&mut self.store, &format!("{}.delta", slot.name), Group::Stage(slot.stage));
                    ids.push(id);
                }
            }
        }
        ids
    }

    /// Current value of each FLoR layer's δ when not overridden or sampled.
    pub fn current_deltas(&self) -> Vec<f64> {
        self.norms
            .iter()
            .filter_map(|s| match &s.layer {
                NormLayer::Flor(l) => Some(match l.delta {
                    Some(id) => self.store.value(id).item().as_f64(),
                    None => l.policy.expectation(),
                }),
                NormLayer::Plain(_) => None,
            })
            .collect()
    }

    /// Clamp learnable δ values into `[0, 1]`.
    pub fn clamp_mix(&mut self) {
        for slot in &self.norms {
            if let NormLayer::Flor(FlorLayer { delta: Some(id), .. }) = &slot.layer {
                for v in self.store.value_mut(*id).data_mut() {
                    *v = v.max(T::zero()).min(T::one());
                }
            }
        }
    }

    /// Replace all heads by one fresh head.
    pub fn replace_head(&mut self, kind: HeadKind, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<()> {
        let d = self.feature_dim();
        let classes = match kind {
            HeadKind::Linear => (weight.shape() == [d, weight.shape().get(1).copied().unwrap_or(0)]).then(|| weight.shape()[1]),
            HeadKind::Cosine { .. } => (weight.shape().len() == 2 && weight.shape()[1] == d).then(|| weight.shape()[0]),
        }
        .ok_or_else(|| invalid("replace_head", format!("weight {:?} for feature dim {d}", weight.shape())))?;
        let weight = self.store.add("finetune_head.weight", weight, ParamKind::Weight, Group::Head);
        let bias = bias.map(|b| self.store.add("finetune_head.bias", b, ParamKind::Weight, Group::Head));
        self.heads = vec![Head { kind, weight, bias, classes }];
        Ok(())
    }

    fn apply_norm(&self, ctx: &mut Ctx<T>, st: &mut PassState<'_, '_, T>, idx: usize, x: Var) -> Result<Var> {
        let slot = &self.norms[idx];
        let training = st.opts.training;
        let bn_training = training && slot.stage >= st.opts.frozen_stages;
        let mut out = match &slot.layer {
            NormLayer::Plain(branch) => {
                st.branches.push(None);
                branch.forward(ctx, x, bn_training)?
            }
            NormLayer::Flor(layer) => {
                let delta_var = match (&mut st.opts.deltas, layer.delta) {
                    (Deltas::Override(list), _) => {
                        let d = norm::check_ratio(list[st.flor_seen])?;
                        ctx.tape.constant(Tensor::scalar(T::of(d)))
                    }
                    (_, Some(id)) => ctx.param(id),
                    (Deltas::Sample(rng), None) if layer.policy.mode == MixMode::BetaSampled => {
                        let d = norm::sample_mix_ratio(&layer.policy, Some(&mut **rng))?;
                        ctx.tape.constant(Tensor::scalar(T::of(d)))
                    }
                    (_, None) => ctx.tape.constant(Tensor::scalar(T::of(layer.policy.expectation()))),
                };
                st.flor_seen += 1;
                st.deltas.push(ctx.tape.value(delta_var).item().as_f64());
                let fo = flor_forward_var(ctx, x, layer, delta_var, bn_training)?;
                st.branches.push(Some((fo.y1, fo.y2)));
                fo.out
            }
        };
        if let Some(Some(d)) = st.opts.displacements.and_then(|ds| ds.get(idx)) {
            let dv = ctx.tape.constant(d.clone());
            out = ctx.tape.add(out, dv)?;
        }
        st.taps.push(out);
        Ok(out)
    }

    /// Feature extraction with every normalization output tapped.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, mut opts: ForwardOpts<'_, T>) -> Result<ForwardOut> {
        let [c, h, w] = self.config.input;
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(invalid("forward_features", format!("input {shape:?} does not match [b, {c}, {h}, {w}]")));
        }
        if let Deltas::Override(list) = &opts.deltas {
            if list.len() != self.num_flor_layers() {
                return Err(CoreError::OverrideLength { expected: self.num_flor_layers(), got: list.len() });
            }
        }
        if let Some(ds) = opts.displacements {
            if ds.len() != self.norms.len() {
                return Err(invalid("forward_features", format!("{} displacements for {} taps", ds.len(), self.norms.len())));
            }
        }
        let mut st = PassState { opts: &mut opts, taps: Vec::new(), branches: Vec::new(), deltas: Vec::new(), flor_seen: 0 };
        let features = match &self.arch {
            Arch::Cnn { stem, stages } => self.cnn_body(ctx, &mut st, x, *stem, stages)?,
            Arch::Vit { patch_w, patch_b, cls, pos, blocks } => {
                self.vit_body(ctx, &mut st, x, (*patch_w, *patch_b, *cls, *pos), blocks)?
            }
        };
        Ok(ForwardOut { features, taps: st.taps, branches: st.branches, deltas: st.deltas })
    }

    fn cnn_body(&self, ctx: &mut Ctx<T>, st: &mut PassState<'_, '_, T>, x: Var, stem: ParamId, stages: &[Vec<Block>]) -> Result<Var> {
        let mut tap = 0;
        let w = ctx.param(stem);
        let mut hcur = ctx.tape.conv2d(x, w, 1, 1)?;
        hcur = self.apply_norm(ctx, st, tap, hcur)?;
        tap += 1;
        hcur = ctx.tape.relu(hcur)?;
        for blocks in stages {
            for blk in blocks {
                let w1 = ctx.param(blk.conv1);
                let mut o = ctx.tape.conv2d(hcur, w1, blk.stride, 1)?;
                o = self.apply_norm(ctx, st, tap, o)?;
                o = ctx.tape.relu(o)?;
                let w2 = ctx.param(blk.conv2);
                o = ctx.tape.conv2d(o, w2, 1, 1)?;
                o = self.apply_norm(ctx, st, tap + 1, o)?;
                tap += 2;
                let sc = match blk.shortcut {
                    Some(ws) => {
                        let ws = ctx.param(ws);
                        let s = ctx.tape.conv2d(hcur, ws, blk.stride, 0)?;
                        let s = self.apply_norm(ctx, st, tap, s)?;
                        tap += 1;
                        s
                    }
                    None => hcur,
                };
                let sum = ctx.tape.add(o, sc)?;
                hcur = ctx.tape.relu(sum)?;
            }
        }
        let s = ctx.tape.shape(hcur).to_vec();
        let pooled = ctx.tape.avg_pool2d(hcur, s[2], s[3])?;
        Ok(ctx.tape.reshape(pooled, [s[0], s[1]])?)
    }

    fn vit_body(
        &self,
        ctx: &mut Ctx<T>,
        st: &mut PassState<'_, '_, T>,
        x: Var,
        (patch_w, patch_b, cls, pos): (ParamId, ParamId, ParamId, ParamId),
        blocks: &[VitBlock],
    ) -> Result<Var> {
        let e = self.config.embed_dim;
        let heads = self.config.heads;
        let b = ctx.tape.shape(x)[0];
        let pw = ctx.param(patch_w);
        let p = ctx.tape.conv2d(x, pw, self.config.patch, 0)?;
        let n = ctx.tape.value(p).numel() / (b * e);
        let p = ctx.tape.reshape(p, [b, e, n])?;
        let p = ctx.tape.permute(p, &[0, 2, 1])?;
        let pb = ctx.param(patch_b);
        let p = ctx.tape.add_channel(p, pb, View3 { outer: b * n, channels: e, inner: 1 })?;
        let cls_v = ctx.param(cls);
        let cls_b = ctx.tape.expand_leading(cls_v, b)?;
        let mut hcur = ctx.tape.concat(&[cls_b, p], 1)?;
        let pos_v = ctx.param(pos);
        let pos_b = ctx.tape.expand_leading(pos_v, b)?;
        hcur = ctx.tape.add(hcur, pos_b)?;
        let t = n + 1;
        for (i, blk) in blocks.iter().enumerate() {
            let a = self.apply_norm(ctx, st, 2 * i, hcur)?;
            let a = attention(ctx, a, blk, heads)?;
            hcur = ctx.tape.add(hcur, a)?;
            let m = self.apply_norm(ctx, st, 2 * i + 1, hcur)?;
            let m = mlp(ctx, m, blk)?;
            hcur = ctx.tape.add(hcur, m)?;
        }
        hcur = self.apply_norm(ctx, st, 2 * blocks.len(), hcur)?;
        let f = ctx.tape.narrow(hcur, 1, 0, 1)?;
        debug_assert_eq!(ctx.tape.shape(hcur)[1], t);
        Ok(ctx.tape.reshape(f, [b, e])?)
    }

    /// Logits of head `index` for `[b, d]` features.
    pub fn head_logits(&self, ctx: &mut Ctx<T>, features: Var, index: usize) -> Result<Var> {
        let head = self.heads.get(index).ok_or_else(|| invalid("classify", format!("no head {index}")))?;
        let w = ctx.param(head.weight);
        match head.kind {
            HeadKind::Linear => {
                let b = head.bias.map(|b| ctx.param(b));
                Ok(ctx.tape.linear(features, w, b)?)
            }
            HeadKind::Cosine { scale } => {
                let f = ctx.tape.l2_normalize_rows(features)?;
                let wn = ctx.tape.l2_normalize_rows(w)?;
                let wt = ctx.tape.permute(wn, &[1, 0])?;
                let cos = ctx.tape.matmul(f, wt)?;
                Ok(ctx.tape.mul_scalar(cos, scale)?)
            }
        }
    }

    /// Run a forward pass on a fresh tape and return its pieces.
    pub fn run(&self, x: Tensor<T>, opts: ForwardOpts<'_, T>, record: bool) -> Result<Pass<T>> {
        let mut tape = if record { Tape::new() } else { Tape::inference() };
        let (out, updates) = {
            let mut ctx = Ctx::new(&mut tape, &self.store);
            let xv = ctx.tape.leaf(x, false);
            let out = self.forward(&mut ctx, xv, opts)?;
            (out, ctx.take_updates())
        };
        Ok(Pass { tape, out, updates })
    }

    /// Features of a batch in eval mode, as row-major `[b, d]` values.
    pub fn features(&self, x: Tensor<T>, deltas: Deltas<'_>) -> Result<Tensor<T>> {
        let pass = self.run(x, ForwardOpts::eval().with_deltas(deltas), false)?;
        Ok(pass.tape.value(pass.out.features).clone())
    }

    /// Logits of every head; two-branch models classify each stream's
    /// features with its own head.
    pub fn classify(&self, x: Tensor<T>, training: bool, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.store);
        let xv = ctx.tape.leaf(x, false);
        let mut logits = Vec::new();
        if self.config.norm_mode == NormMode::TwoBranch {
            let n = self.num_flor_layers();
            for (i, d) in [0.0, 1.0].into_iter().enumerate() {
                let list = vec![d; n];
                let opts = ForwardOpts { training, deltas: Deltas::Override(&list), frozen_stages: 0, displacements: None };
                let out = self.forward(&mut ctx, xv, opts)?;
                let l = self.head_logits(&mut ctx, out.features, i)?;
                logits.push(ctx.tape.value(l).clone());
            }
        } else {
            let deltas = match rng {
                Some(r) if training => Deltas::Sample(r),
                _ => Deltas::Expectation,
            };
            let opts = ForwardOpts { training, deltas, frozen_stages: 0, displacements: None };
            let out = self.forward(&mut ctx, xv, opts)?;
            let l = self.head_logits(&mut ctx, out.features, 0)?;
            logits.push(ctx.tape.value(l).clone());
        }
        Ok(logits)
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        self.store.apply_stat_updates(updates);
    }
}

pub struct Pass<T: Scalar> {
    pub tape: Tape<T>,
    pub out: ForwardOut,
    pub updates: Vec<StatUpdate<T>>,
}

fn dense<T: Scalar>(ctx: &mut Ctx<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (ctx.param(w), ctx.param(b));
    Ok(ctx.tape.linear(x, w, Some(b))?)
}

/// Multi-head self-attention over `[b, t, e]`.
fn attention<T: Scalar>(ctx: &mut Ctx<T>, x: Var, blk: &VitBlock, heads: usize) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    let (b, t, e) = (s[0], s[1], s[2]);
    let dh = e / heads;
    let flat = ctx.tape.reshape(x, [b * t, e])?;
    let qkv = dense(ctx, flat, blk.qkv_w, blk.qkv_b)?;
    let qkv = ctx.tape.reshape(qkv, [b, t, 3, heads, dh])?;
    let qkv = ctx.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let p = ctx.tape.narrow(qkv, 0, i, 1)?;
        parts.push(ctx.tape.reshape(p, [b * heads, t, dh])?);
    }
    let scores = ctx.tape.bmm(parts[0], parts[1], true)?;
    let scores = ctx.tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = ctx.tape.softmax_last(scores)?;
    let o = ctx.tape.bmm(attn, parts[2], false)?;
    let o = ctx.tape.reshape(o, [b, heads, t, dh])?;
    let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
    let o = ctx.tape.reshape(o, [b * t, e])?;
    let o = dense(ctx, o, blk.proj_w, blk.proj_b)?;
    Ok(ctx.tape.reshape(o, [b, t, e])?)
}

fn mlp<T: Scalar>(ctx: &mut Ctx<T>, x: Var, blk: &VitBlock) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    let flat = ctx.tape.reshape(x, [s[0] * s[1], s[2]])?;
    let hdn = dense(ctx, flat, blk.fc1_w, blk.fc1_b)?;
    let hdn = ctx.tape.gelu(hdn)?;
    let o = dense(ctx, hdn, blk.fc2_w, blk.fc2_b)?;
    Ok(ctx.tape.reshape(o, s)?)
}

/// One transformer block (norm, attention, norm, MLP, both residual) with
/// layer normalization, exposed for gradient checks of the attention path.
pub struct AttentionBlock {
    block: VitBlock,
    norm1: Branch,
    norm2: Branch,
    heads: usize,
}

impl AttentionBlock {
    pub fn create<T: Scalar>(store: &mut ParamStore<T>, embed: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !embed.is_multiple_of(heads) {
            return Err(CoreError::InvalidConfig(format!("embed {embed} not divisible by heads {heads}")));
        }
        let mut add = |name: &str, shape: &[usize], std: f64| {
            let v = normal_tensor(rng, shape, std);
            store.add(name, v, ParamKind::Weight, Group::Stage(0))
        };
        let m = embed * mlp_ratio;
        let block = VitBlock {
            qkv_w: add("qkv.weight", &[embed, 3 * embed], 0.3),
            qkv_b: add("qkv.bias", &[3 * embed], 0.1),
            proj_w: add("proj.weight", &[embed, embed], 0.3),
            proj_b: add("proj.bias", &[embed], 0.1),
            fc1_w: add("fc1.weight", &[embed, m], 0.3),
            fc1_b: add("fc1.bias", &[m], 0.1),
            fc2_w: add("fc2.weight", &[m, embed], 0.3),
            fc2_b: add("fc2.bias", &[embed], 0.1),
        };
        let norm1 = Branch::create(store, "norm1", NormKind::Layer, embed, Group::Stage(0));
        let norm2 = Branch::create(store, "norm2", NormKind::Layer, embed, Group::Stage(0));
        Ok(Self { block, norm1, norm2, heads })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let a = self.norm1.forward(ctx, x, true)?;
        let a = attention(ctx, a, &self.block, self.heads)?;
        let h = ctx.tape.add(x, a)?;
        let m = self.norm2.forward(ctx, h, true)?;
        let m = mlp(ctx, m, &self.block)?;
        Ok(ctx.tape.add(h, m)?)
    }
}
