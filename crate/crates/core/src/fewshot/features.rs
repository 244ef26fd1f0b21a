use flor_tensor::{Scalar, Tensor};

use crate::backbone::{Deltas, ForwardOpts, Model};
use crate::data::Dataset;
use crate::error::{invalid, CoreError, Result};
use crate::probes::{low_freq_noise, PerturbationSpec, Space};
use crate::rng::SeedStream;

/// How features are extracted for evaluation. The default is plain
/// eval-mode inference.
#[derive(Clone, Copy, Debug)]
pub struct Extraction<'a> {
    /// Fixed δ for every FLoR layer.
    pub deltas: Option<&'a [f64]>,
    /// Additive noise; sample `i` draws from `seed.split(i)`.
    pub noise: Option<(&'a PerturbationSpec, SeedStream)>,
    pub batch: usize,
}

impl Default for Extraction<'_> {
    fn default() -> Self {
        Self { deltas: None, noise: None, batch: 64 }
    }
}

/// Eval-mode features of `indices` (all samples when `None`), one row per
/// sample.
pub fn extract_features<T: Scalar>(
    model: &Model<T>,
    d: &Dataset,
    indices: Option<&[usize]>,
    ex: &Extraction<'_>,
) -> Result<Vec<Vec<f64>>> {
    let all: Vec<usize>;
    let indices = match indices {
        Some(i) => i,
        None => {
            all = (0..d.len()).collect();
            &all
        }
    };
    let noise = ex.noise.filter(|(spec, _)| spec.variance > 0.0);
    let feature_tap = match noise {
        Some((spec, _)) => match spec.space {
            Space::Pixel => {
                let [_, h, w] = d.shape();
                spec.validate(h, w)?;
                None
            }
            Space::Feature(tap) => {
                let tap = match tap {
                    Some(t) => t,
                    None => model.final_tap()?,
                };
                let shapes = model.tap_shapes(1);
                let shape = shapes.get(tap).ok_or_else(|| invalid("extract_features", format!("no tap {tap}")))?;
                if shape.len() != 4 {
                    return Err(CoreError::NotApplicable(format!("feature noise on non-spatial tap {tap} {shape:?}")));
                }
                spec.validate(shape[2], shape[3])?;
                Some((tap, [shape[1], shape[2], shape[3]]))
            }
        },
        None => None,
    };
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(ex.batch.max(1)) {
        let x = match (noise, feature_tap) {
            (Some((spec, seed)), None) => {
                let shape = d.shape();
                let mut err = None;
                let x = d.batch_with::<T>(chunk, |i, buf| match low_freq_noise(shape, spec, &mut seed.split(i as u64).rng()) {
                    Ok(n) => buf.iter_mut().zip(n.data()).for_each(|(p, &v)| *p += v as f32),
                    Err(e) => err = Some(e),
                });
                if let Some(e) = err {
                    return Err(e);
                }
                x
            }
            _ => d.batch::<T>(chunk),
        };
        let mut disp = None;
        if let (Some((spec, seed)), Some((tap, shape))) = (noise, feature_tap) {
            let mut data = Vec::with_capacity(chunk.len() * shape.iter().product::<usize>());
            for &i in chunk {
                let n = low_freq_noise(shape, spec, &mut seed.split(i as u64).rng())?;
                data.extend(n.data().iter().map(|&v| T::of(v)));
            }
            let mut list = vec![None; model.num_taps()];
            list[tap] = Some(Tensor::new([chunk.len(), shape[0], shape[1], shape[2]], data)?);
            disp = Some(list);
        }
        let deltas = match ex.deltas {
            Some(list) => Deltas::Override(list),
            None => Deltas::Expectation,
        };
        let mut opts = ForwardOpts::eval().with_deltas(deltas);
        opts.displacements = disp.as_deref();
        let pass = model.run(x, opts, false)?;
        let f = pass.tape.value(pass.out.features);
        let dim = f.shape()[1];
        rows.extend(f.data().chunks(dim).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    Ok(rows)
}
