//! 2-D convolution via per-sample im2col + GEMM.

use crate::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// The input already is the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride).min(ow);
        // ox·stride + kj − pad < width
        let limit = self.width + self.pad;
        let hi = if limit > kj { ((limit - kj - 1) / self.stride + 1).min(ow) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Patch matrix `[C·KH·KW, OH·OW]` of one image.
fn im2col<T: Scalar>(g: &ConvGeometry, img: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let chan = &img[c * g.height * g.width..][..g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..][..plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..oh {
                    let out_row = &mut dst[oy * ow..][..ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..][..g.width];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto one image.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let chan = &mut img[c * g.height * g.width..][..g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..][..plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..][..g.width];
                    let s = &src[oy * ow..][..ow];
                    for ox in lo..hi {
                        dst[ox * g.stride + kj - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let (ckk, plane, o) = (g.patch_len(), g.out_plane(), g.out_channels);
    let mut y = vec![T::zero(); g.batch * o * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for b in 0..g.batch {
        let img = &x[b * g.in_image()..][..g.in_image()];
        let out = &mut y[b * o * plane..][..o * plane];
        if g.is_pointwise() {
            gemm(o, ckk, plane, w, false, img, false, out, T::zero());
        } else {
            im2col(g, img, &mut cols);
            gemm(o, ckk, plane, w, false, &cols, false, out, T::zero());
        }
    }
    y
}

/// Gradients w.r.t. input and weight; each is computed only when requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ckk, plane, o) = (g.patch_len(), g.out_plane(), g.out_channels);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); o * ckk];
        for b in 0..g.batch {
            let img = &x[b * g.in_image()..][..g.in_image()];
            let dyb = &dy[b * o * plane..][..o * plane];
            let patches = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            gemm(o, plane, ckk, dyb, false, patches, true, &mut dw, T::one());
        }
        dw
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        for b in 0..g.batch {
            let dyb = &dy[b * o * plane..][..o * plane];
            let dimg = &mut dx[b * g.in_image()..][..g.in_image()];
            if g.is_pointwise() {
                gemm(ckk, o, plane, w, true, dyb, false, dimg, T::zero());
            } else {
                gemm(ckk, o, plane, w, true, dyb, false, &mut cols, T::zero());
                col2im(g, &cols, dimg);
            }
        }
        dx
    });
    (dx, dw)
}
