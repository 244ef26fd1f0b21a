use flor_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::noise::PerturbationSpec;
use crate::backbone::Model;
use crate::data::Dataset;
use crate::error::{invalid, CoreError, Result};
use crate::fewshot::{evaluate, evaluate_features, extract_features, Calibration, EvalResult, Extraction, FinetuneConfig, Method, Protocol};
use crate::rng::{purpose, SeedStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub ci: Vec<f64>,
}

impl SweepCurve {
    fn push(&mut self, x: f64, r: &EvalResult) {
        self.x.push(x);
        self.y.push(r.mean_accuracy);
        self.ci.push(r.ci95);
    }

    /// `y(x₀) − y` at every point, `x₀` being the first.
    pub fn drops(&self) -> Vec<f64> {
        self.y.iter().map(|y| self.y.first().copied().unwrap_or(0.0) - y).collect()
    }

    /// CSV with header `x,accuracy,ci95`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,accuracy,ci95\n");
        for ((x, y), c) in self.x.iter().zip(&self.y).zip(&self.ci) {
            s.push_str(&format!("{x},{y},{c}\n"));
        }
        s
    }
}

fn check_axis(op: &'static str, xs: &[f64], lo: f64, hi: f64) -> Result<()> {
    if xs.is_empty() {
        return Err(invalid(op, "empty sweep"));
    }
    if xs.iter().any(|&x| !(x >= lo && x <= hi)) {
        return Err(invalid(op, format!("values must lie in [{lo}, {hi}]")));
    }
    if xs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid(op, "values must be strictly increasing"));
    }
    Ok(())
}

/// Prototype accuracy under additive low-frequency noise of each variance.
/// Every variance reuses the same episodes and the same per-sample noise
/// draws, scaled, so points differ only in noise strength.
pub fn perturb_sweep<T: Scalar>(
    model: &Model<T>,
    d: &Dataset,
    spec: &PerturbationSpec,
    variances: &[f64],
    protocol: &Protocol,
    seed: SeedStream,
) -> Result<SweepCurve> {
    check_axis("perturb_sweep", variances, 0.0, f64::INFINITY)?;
    if variances[0] != 0.0 {
        return Err(invalid("perturb_sweep", "variance list must include 0"));
    }
    let noise_seed = seed.split(purpose::NOISE);
    let mut curve = SweepCurve { x: Vec::new(), y: Vec::new(), ci: Vec::new() };
    for &v in variances {
        let s = spec.with_variance(v);
        let ex = Extraction { noise: Some((&s, noise_seed)), ..Extraction::default() };
        let feats = extract_features(model, d, None, &ex)?;
        let r = evaluate_features(&feats, d, protocol, &Method::Prototype, Calibration::None, seed)?;
        curve.push(v, &r);
    }
    Ok(curve)
}

/// Prototype accuracy with every FLoR layer pinned to each δ.
pub fn delta_sweep<T: Scalar>(model: &Model<T>, d: &Dataset, deltas: &[f64], protocol: &Protocol, seed: SeedStream) -> Result<SweepCurve> {
    let n = model.num_flor_layers();
    if n == 0 {
        return Err(CoreError::NotApplicable(format!("{:?} model has no mixing ratio", model.config.norm_mode)));
    }
    check_axis("delta_sweep", deltas, 0.0, 1.0)?;
    if deltas[0] != 0.0 || deltas[deltas.len() - 1] != 1.0 {
        return Err(invalid("delta_sweep", "δ list must include 0 and 1"));
    }
    let mut curve = SweepCurve { x: Vec::new(), y: Vec::new(), ci: Vec::new() };
    for &delta in deltas {
        let list = vec![delta; n];
        let ex = Extraction { deltas: Some(&list), ..Extraction::default() };
        let feats = extract_features(model, d, None, &ex)?;
        let r = evaluate_features(&feats, d, protocol, &Method::Prototype, Calibration::None, seed)?;
        curve.push(delta, &r);
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub freeze_depths: Vec<usize>,
    pub lr_ratios: Vec<f64>,
    /// `cells[i][j]` for depth `i`, ratio `j`.
    pub cells: Vec<Vec<EvalResult>>,
}

impl GridResult {
    /// `(depth index, ratio index)` of the highest mean accuracy; the first
    /// cell wins ties.
    pub fn best(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if c.mean_accuracy > self.cells[best.0][best.1].mean_accuracy {
                    best = (i, j);
                }
            }
        }
        best
    }

    /// Max minus min of the cell means.
    pub fn range(&self) -> f64 {
        let means = self.cells.iter().flatten().map(|c| c.mean_accuracy);
        let (lo, hi) = means.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), m| (l.min(m), h.max(m)));
        hi - lo
    }

    /// CSV with header `freeze_depth,lr_ratio,accuracy,ci95`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("freeze_depth,lr_ratio,accuracy,ci95\n");
        for (row, d) in self.cells.iter().zip(&self.freeze_depths) {
            for (c, r) in row.iter().zip(&self.lr_ratios) {
                s.push_str(&format!("{d},{r},{},{}\n", c.mean_accuracy, c.ci95));
            }
        }
        s
    }
}

/// Fine-tuned accuracy for each (freeze depth, backbone lr ratio) pair; all
/// cells see the same episodes.
pub fn finetune_grid<T: Scalar>(
    model: &Model<T>,
    d: &Dataset,
    freeze_depths: &[usize],
    lr_ratios: &[f64],
    base: &FinetuneConfig,
    protocol: &Protocol,
    seed: SeedStream,
) -> Result<GridResult> {
    if freeze_depths.is_empty() || lr_ratios.is_empty() {
        return Err(invalid("finetune_grid", "empty grid axis"));
    }
    let mut cells = Vec::with_capacity(freeze_depths.len());
    for &depth in freeze_depths {
        let mut row = Vec::with_capacity(lr_ratios.len());
        for &ratio in lr_ratios {
            let cfg = FinetuneConfig { freeze_depth: depth, lr_backbone_ratio: ratio, ..base.clone() };
            row.push(evaluate(model, d, protocol, &Method::Finetune(cfg), Calibration::None, seed)?);
        }
        cells.push(row);
    }
    Ok(GridResult { freeze_depths: freeze_depths.to_vec(), lr_ratios: lr_ratios.to_vec(), cells })
}
