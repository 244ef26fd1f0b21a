//! AdamW with decoupled weight decay, and SGD with momentum.

use flor_tensor::{Scalar, Tensor};

use crate::params::{ParamId, ParamKind, ParamStore};

pub trait Optimizer<T: Scalar> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]);
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    state: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0, state: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

impl<T: Scalar> Optimizer<T> for AdamW<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (id, g) in grads {
            let decay = if store.get(*id).kind == ParamKind::Weight { T::of(self.lr * self.weight_decay) } else { T::zero() };
            let p = store.value_mut(*id).data_mut();
            let (m, v) = self.state[id.index()].get_or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            for i in 0..p.len() {
                let gi = g.data()[i];
                p[i] -= decay * p[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Heavy-ball SGD, `v ← μ·v + g`, `p ← p − lr·scale(p)·v`, with a
/// per-parameter learning-rate scale.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    scale: Vec<f64>,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    /// `scale[i]` multiplies the learning rate of parameter `i`.
    pub fn new(lr: f64, momentum: f64, scale: Vec<f64>) -> Self {
        Self { lr, momentum, scale, velocity: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mu = T::of(self.momentum);
        for (id, g) in grads {
            let lr = T::of(self.lr * self.scale.get(id.index()).copied().unwrap_or(1.0));
            let p = store.value_mut(*id).data_mut();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); p.len()]);
            for i in 0..p.len() {
                v[i] = mu * v[i] + g.data()[i];
                p[i] -= lr * v[i];
            }
        }
    }
}
