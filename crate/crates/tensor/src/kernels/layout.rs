use crate::scalar::Scalar;

pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // stride in the source for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn narrow<T: Scalar>(data: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, dim, inner) = split_at_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

/// Adds `src` (the narrowed block) back into a zero-initialised `dst` of `shape`.
pub fn narrow_backward<T: Scalar>(
    src: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let (outer, dim, inner) = split_at_axis(shape, axis);
    let mut dst = vec![T::zero(); outer * dim * inner];
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        dst[base..base + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
    dst
}
