use flor_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

/// Where low-frequency noise is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pixel,
    /// Added to one normalization output; `None` picks the model's
    /// final-stage tap.
    Feature(Option<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub space: Space,
    /// Control grid `(h, w)`.
    pub grid: (usize, usize),
    pub variance: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { space: Space::Pixel, grid: (4, 4), variance: 0.0 }
    }
}

impl PerturbationSpec {
    pub fn with_variance(mut self, variance: f64) -> Self {
        self.variance = variance;
        self
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(invalid("low_freq_noise", format!("variance {} must be finite and >= 0", self.variance)));
        }
        let (gh, gw) = self.grid;
        if gh == 0 || gw == 0 {
            return Err(invalid("low_freq_noise", format!("grid {gh}x{gw} is empty")));
        }
        if gh > height || gw > width {
            return Err(CoreError::GridExceedsTarget { grid: (gh, gw), target: (height, width) });
        }
        Ok(())
    }
}

/// Bilinear resize of a row-major `gh × gw` grid to `h × w`, corners
/// aligned: output pixel `(i, j)` samples the grid at
/// `(i·(gh−1)/(h−1), j·(gw−1)/(w−1))`.
pub fn bilinear_upsample<T: Scalar>(grid: &[T], gh: usize, gw: usize, h: usize, w: usize) -> Vec<T> {
    assert_eq!(grid.len(), gh * gw, "grid length");
    let axis = |g: usize, n: usize| -> Vec<(usize, usize, T)> {
        (0..n)
            .map(|i| {
                if g == 1 || n == 1 {
                    return (0, 0, T::zero());
                }
                let num = i * (g - 1);
                let lo = num / (n - 1);
                let frac = (num % (n - 1)) as f64 / (n - 1) as f64;
                (lo, (lo + 1).min(g - 1), T::of(frac))
            })
            .collect()
    };
    let (ys, xs) = (axis(gh, h), axis(gw, w));
    let mut out = Vec::with_capacity(h * w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = grid[y0 * gw + x0] * (T::one() - fx) + grid[y0 * gw + x1] * fx;
            let bot = grid[y1 * gw + x0] * (T::one() - fx) + grid[y1 * gw + x1] * fx;
            out.push(top * (T::one() - fy) + bot * fy);
        }
    }
    out
}

/// Low-frequency Gaussian noise of shape `[c, h, w]`: an independent
/// `grid` of `N(0, variance)` values per channel, bilinearly upsampled.
pub fn low_freq_noise<R: Rng + ?Sized>(shape: [usize; 3], spec: &PerturbationSpec, rng: &mut R) -> Result<Tensor<f64>> {
    let [c, h, w] = shape;
    spec.validate(h, w)?;
    let (gh, gw) = spec.grid;
    let sigma = spec.variance.sqrt();
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let grid: Vec<f64> = (0..gh * gw).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        data.extend(bilinear_upsample(&grid, gh, gw, h, w));
    }
    Ok(Tensor::new([c, h, w], data)?)
}
