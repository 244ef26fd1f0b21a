//! Parameter storage and the per-forward binding of parameters onto a tape.

use flor_tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizers.
    Weight,
    /// Running statistics; never differentiated.
    Buffer,
    /// A learnable mixing ratio, kept in `[0, 1]`.
    Mix,
}

/// Which part of the network a parameter belongs to, for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Stage(usize),
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub group: Group,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind, group: Group) -> ParamId {
        self.params.push(Param { name: name.into(), value, kind, group });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars (weights and mixing ratios).
    pub fn count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            let m = T::of(u.momentum);
            let keep = T::one() - m;
            for (r, &b) in self.params[u.mean.0].value.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.params[u.var.0].value.data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b;
            }
        }
    }
}

/// A pending running-statistics update from one batch-normalization call.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
    pub momentum: f64,
}

/// Binds stored parameters onto a tape lazily, one leaf per parameter, and
/// collects running-statistic updates produced during the forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Every weight and mixing ratio is differentiable.
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        let trainable = store.params.iter().map(|p| p.kind != ParamKind::Buffer).collect();
        Self::with_mask(tape, store, trainable)
    }

    pub fn with_mask(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len(), "trainable mask length");
        Self { tape, store, bound: vec![None; store.len()], trainable, updates: Vec::new() }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn push_update(&mut self, u: StatUpdate<T>) {
        self.updates.push(u);
    }

    pub fn take_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.updates)
    }

    /// Bound trainable parameters, in id order.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|_| self.trainable[i]).map(|v| (ParamId(i), v)))
            .collect()
    }
}

/// Pull gradients of the given bindings out of a finished backward pass.
/// Parameters the loss did not reach get no entry.
pub fn collect_grads<T: Scalar>(grads: &mut Gradients<T>, bindings: &[(ParamId, Var)]) -> Vec<(ParamId, Tensor<T>)> {
    bindings.iter().filter_map(|&(id, v)| grads.take(v).map(|g| (id, g))).collect()
}
