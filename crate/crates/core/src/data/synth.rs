use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{CoreError, Result};
use crate::probes::bilinear_upsample;
use crate::rng::SeedStream;

/// Appearance statistics of one domain. Pixels are
/// `bg + κ·(fg − bg)·ink + offset + illumination + noise`, clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub background: [f32; 3],
    pub foreground: [f32; 3],
    /// Std of a per-image, per-channel colour offset.
    pub color_jitter: f32,
    /// Std of the per-image contrast factor κ around 1.
    pub contrast_jitter: f32,
    /// Std of the low-frequency illumination field at its control points.
    pub illumination: f32,
    pub illumination_grid: usize,
    /// Std of independent per-pixel noise.
    pub noise: f32,
}

impl DomainStyle {
    /// Dark background, bright strokes.
    pub fn source() -> Self {
        Self {
            name: "source".into(),
            background: [0.15, 0.2, 0.25],
            foreground: [0.85, 0.75, 0.6],
            color_jitter: 0.05,
            contrast_jitter: 0.1,
            illumination: 0.05,
            illumination_grid: 3,
            noise: 0.02,
        }
    }

    /// Warm, washed-out background with faint strokes and strong uneven
    /// lighting.
    pub fn target() -> Self {
        Self {
            name: "target".into(),
            background: [0.6, 0.45, 0.3],
            foreground: [0.8, 0.75, 0.45],
            color_jitter: 0.05,
            contrast_jitter: 0.1,
            illumination: 0.12,
            illumination_grid: 3,
            noise: 0.03,
        }
    }

    /// `to` with its colours and illumination strength pulled back toward
    /// `from`: `t = 1` is `to`, `t = 0` has the colours of `from`.
    pub fn blend(from: &Self, to: &Self, t: f32) -> Self {
        let lerp = |a: f32, b: f32| a + t * (b - a);
        Self {
            name: to.name.clone(),
            background: std::array::from_fn(|c| lerp(from.background[c], to.background[c])),
            foreground: std::array::from_fn(|c| lerp(from.foreground[c], to.foreground[c])),
            illumination: lerp(from.illumination, to.illumination),
            ..to.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Id of the first class; class `i` uses template `class_offset + i`.
    pub class_offset: usize,
    /// Seeds the class templates, independently of the per-image stream.
    pub template_seed: u64,
    pub domain: DomainStyle,
    pub split: Split,
}

const STROKES: usize = 3;

/// Stroke segments of a class template in unit coordinates.
fn template(seed: u64, class: usize) -> Vec<[f32; 4]> {
    let mut rng = SeedStream::new(seed).split(class as u64).rng();
    let mut segs = Vec::with_capacity(STROKES);
    while segs.len() < STROKES {
        let s: [f32; 4] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
        if ((s[2] - s[0]).powi(2) + (s[3] - s[1]).powi(2)).sqrt() >= 0.3 {
            segs.push(s);
        }
    }
    segs
}

fn segment_distance(px: f32, py: f32, s: &[f32; 4]) -> f32 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (s[0] + t * dx - px, s[1] + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

fn render(spec: &SynthSpec, segs: &[[f32; 4]], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let size = spec.image_size;
    let sz = size as f32;
    let st = &spec.domain;
    let gauss = |std: f32, rng: &mut ChaCha8Rng| -> f32 {
        if std > 0.0 {
            Normal::new(0.0, std).expect("finite").sample(rng)
        } else {
            0.0
        }
    };
    // instance jitter: rotation, scale, translation (pixels), stroke width
    let angle = rng.random_range(-0.25f32..0.25);
    let scale = rng.random_range(0.9f32..1.1);
    let (tx, ty) = (rng.random_range(-2.0f32..2.0), rng.random_range(-2.0f32..2.0));
    let width = rng.random_range(1.5f32..2.5);
    let kappa = (1.0 + gauss(st.contrast_jitter, rng)).max(0.2);
    let offset: [f32; 3] = std::array::from_fn(|_| gauss(st.color_jitter, rng));
    let g = st.illumination_grid.max(1);
    let grid: Vec<f32> = (0..g * g).map(|_| gauss(st.illumination, rng)).collect();
    let light = bilinear_upsample(&grid, g, g, size, size);
    let (sin, cos) = angle.sin_cos();
    let mut img = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            // map the pixel centre back into template space
            let (px, py) = (x as f32 + 0.5 - sz / 2.0 - tx, y as f32 + 0.5 - sz / 2.0 - ty);
            let (ux, uy) = ((cos * px + sin * py) / scale, (-sin * px + cos * py) / scale);
            let (ux, uy) = ((ux + sz / 2.0) / sz, (uy + sz / 2.0) / sz);
            let dist = segs.iter().map(|s| segment_distance(ux, uy, s)).fold(f32::INFINITY, f32::min) * sz;
            let ink = (width / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
            let l = light[y * size + x];
            for c in 0..3 {
                let base = st.background[c] + kappa * (st.foreground[c] - st.background[c]) * ink;
                let v = base + offset[c] + l + gauss(st.noise, rng);
                img[(c * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Render `per_class` images of each class. Deterministic in `rng` and the
/// spec's template seed.
pub fn generate_synthetic(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "synthetic data needs at least 2 classes and 2 samples per class, got {} and {}",
            spec.classes, spec.per_class
        )));
    }
    if spec.image_size < 8 {
        return Err(CoreError::InvalidConfig(format!("image size {} is below 8", spec.image_size)));
    }
    let names = (0..spec.classes).map(|i| format!("class_{:03}", spec.class_offset + i)).collect();
    let mut d = Dataset::new([3, spec.image_size, spec.image_size], names, spec.split);
    for c in 0..spec.classes {
        let segs = template(spec.template_seed, spec.class_offset + c);
        for _ in 0..spec.per_class {
            let img = render(spec, &segs, rng);
            d.push(&img, c, &spec.domain.name)?;
        }
    }
    Ok(d)
}

/// Base classes in the source domain; disjoint novel classes rendered in both
/// the source and the shifted target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub base_classes: usize,
    pub novel_classes: usize,
    pub base_per_class: usize,
    pub novel_per_class: usize,
    pub image_size: usize,
    pub template_seed: u64,
    pub source: DomainStyle,
    pub target: DomainStyle,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            base_classes: 16,
            novel_classes: 10,
            base_per_class: 40,
            novel_per_class: 30,
            image_size: 32,
            template_seed: 7,
            source: DomainStyle::source(),
            target: DomainStyle::target(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub base: Dataset,
    pub novel_source: Dataset,
    pub novel_target: Dataset,
}

pub fn two_domain_benchmark(spec: &BenchmarkSpec, seed: SeedStream) -> Result<Benchmark> {
    let base_spec = SynthSpec {
        classes: spec.base_classes,
        per_class: spec.base_per_class,
        image_size: spec.image_size,
        class_offset: 0,
        template_seed: spec.template_seed,
        domain: spec.source.clone(),
        split: Split::Base,
    };
    let novel = |domain: &DomainStyle| SynthSpec {
        classes: spec.novel_classes,
        per_class: spec.novel_per_class,
        class_offset: spec.base_classes,
        domain: domain.clone(),
        split: Split::Novel,
        ..base_spec.clone()
    };
    Ok(Benchmark {
        base: generate_synthetic(&base_spec, &mut seed.split(0).rng())?,
        novel_source: generate_synthetic(&novel(&spec.source), &mut seed.split(1).rng())?,
        novel_target: generate_synthetic(&novel(&spec.target), &mut seed.split(2).rng())?,
    })
}
