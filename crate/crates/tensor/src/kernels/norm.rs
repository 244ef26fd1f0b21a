//! Group standardization shared by batch, instance and layer normalization.
//!
//! A tensor is viewed as `[outer, channels, inner]`. Batch normalization forms
//! one group per channel over `(outer, inner)`; instance and layer
//! normalization form one group per `(outer, channel)` over `inner`. With
//! `outer == 1` both groupings visit elements in the same order, so the
//! results agree bit for bit.

use std::ops::Range;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One group per channel, reducing over outer and inner axes.
    PerChannel,
    /// One group per (outer, channel) pair, reducing over the inner axis.
    PerSlab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View3 {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl View3 {
    pub fn numel(&self) -> usize {
        self.outer * self.channels * self.inner
    }

    pub fn groups(&self, grouping: Grouping) -> usize {
        match grouping {
            Grouping::PerChannel => self.channels,
            Grouping::PerSlab => self.outer * self.channels,
        }
    }

    pub fn group_len(&self, grouping: Grouping) -> usize {
        match grouping {
            Grouping::PerChannel => self.outer * self.inner,
            Grouping::PerSlab => self.inner,
        }
    }

    /// Contiguous index ranges making up one group, in visiting order.
    pub fn segments(&self, grouping: Grouping, group: usize) -> impl Iterator<Item = Range<usize>> {
        let (inner, channels) = (self.inner, self.channels);
        let (starts, step) = match grouping {
            Grouping::PerChannel => (self.outer, channels * inner),
            Grouping::PerSlab => (1, 0),
        };
        let base = group * inner;
        (0..starts).map(move |a| {
            let s = base + a * step;
            s..s + inner
        })
    }
}

pub struct Standardized<T> {
    pub normalized: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance per group.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn standardize<T: Scalar>(x: &[T], view: View3, grouping: Grouping, eps: T) -> Standardized<T> {
    let groups = view.groups(grouping);
    let n = T::of(view.group_len(grouping) as f64);
    let mut out = Standardized {
        normalized: vec![T::zero(); x.len()],
        mean: Vec::with_capacity(groups),
        var: Vec::with_capacity(groups),
        inv_std: Vec::with_capacity(groups),
    };
    for g in 0..groups {
        let mut sum = T::zero();
        for r in view.segments(grouping, g) {
            for &v in &x[r] {
                sum += v;
            }
        }
        let mean = sum / n;
        let mut sq = T::zero();
        for r in view.segments(grouping, g) {
            for &v in &x[r] {
                let d = v - mean;
                sq += d * d;
            }
        }
        let var = sq / n;
        let inv_std = T::one() / (var + eps).sqrt();
        for r in view.segments(grouping, g) {
            for i in r {
                out.normalized[i] = (x[i] - mean) * inv_std;
            }
        }
        out.mean.push(mean);
        out.var.push(var);
        out.inv_std.push(inv_std);
    }
    out
}

/// `dx = inv_std · (dy − mean(dy) − x̂ · mean(dy · x̂))` per group.
pub fn standardize_backward<T: Scalar>(
    normalized: &[T],
    inv_std: &[T],
    dy: &[T],
    view: View3,
    grouping: Grouping,
) -> Vec<T> {
    let n = T::of(view.group_len(grouping) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (g, &s) in inv_std.iter().enumerate() {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for r in view.segments(grouping, g) {
            for i in r {
                sum_g += dy[i];
                sum_gx += dy[i] * normalized[i];
            }
        }
        let mean_g = sum_g / n;
        let mean_gx = sum_gx / n;
        for r in view.segments(grouping, g) {
            for i in r {
                dx[i] = s * (dy[i] - mean_g - normalized[i] * mean_gx);
            }
        }
    }
    dx
}
