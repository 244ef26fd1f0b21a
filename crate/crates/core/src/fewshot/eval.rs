use flor_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::classify::{calibrate, prototype_classify, prototypes, transductive_refine, Calibration, Metric};
use super::features::{extract_features, Extraction};
use super::finetune::{finetune, predict, FinetuneConfig};
use crate::backbone::Model;
use crate::data::{sample_episode, Dataset, Episode};
use crate::error::{invalid, Result};
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_accuracy: f64,
    /// `1.96 · σ / √N` with the population standard deviation σ.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

impl EvalResult {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Self {
        let n = per_episode.len() as f64;
        if per_episode.is_empty() {
            return Self { mean_accuracy: 0.0, ci95: 0.0, per_episode };
        }
        let mean = per_episode.iter().sum::<f64>() / n;
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Self { mean_accuracy: mean, ci95: 1.96 * var.sqrt() / n.sqrt(), per_episode }
    }

    /// `"62.61 ±0.18"` in percent.
    pub fn display(&self) -> String {
        format!("{:.2} ±{:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub episodes: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { k: 5, n: 5, q: 15, episodes: 600 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Nearest prototype under the cosine metric.
    Prototype,
    /// Prototype classification followed by pseudo-label refinement.
    Transductive { max_iters: usize, tol: f64 },
    Finetune(FinetuneConfig),
}

/// Episode `i` of an evaluation is drawn from `seed.split(i)`.
pub fn episode_for(d: &Dataset, protocol: &Protocol, seed: SeedStream, i: usize) -> Result<Episode> {
    sample_episode(d, protocol.k, protocol.n, protocol.q, &mut seed.split(i as u64).rng())
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

fn pick(feats: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| feats[i].clone()).collect()
}

/// Prototype-style evaluation on precomputed per-sample features.
pub fn evaluate_features(
    feats: &[Vec<f64>],
    d: &Dataset,
    protocol: &Protocol,
    method: &Method,
    calibration: Calibration,
    seed: SeedStream,
) -> Result<EvalResult> {
    if feats.len() != d.len() {
        return Err(invalid("evaluate", format!("{} feature rows for {} samples", feats.len(), d.len())));
    }
    let mut accs = Vec::with_capacity(protocol.episodes);
    for i in 0..protocol.episodes {
        let ep = episode_for(d, protocol, seed, i)?;
        let (s, q) = (pick(feats, &ep.support), pick(feats, &ep.query));
        let pred = match method {
            Method::Prototype => prototype_classify(&s, &ep.support_labels, &q, calibration, Metric::Cosine)?.labels,
            Method::Transductive { max_iters, tol } => {
                let (s, q) = calibrate(&s, &q, calibration);
                let p = prototypes(&s, &ep.support_labels)?;
                transductive_refine(&s, &ep.support_labels, &p, &q, Metric::Cosine, *max_iters, *tol)?.labels
            }
            Method::Finetune(_) => return Err(invalid("evaluate", "fine-tuning needs the model")),
        };
        accs.push(accuracy(&pred, &ep.query_labels));
    }
    Ok(EvalResult::from_accuracies(accs))
}

/// Episodic accuracy of `model` on `d`. Fine-tuning starts every episode
/// from a fresh copy of `model`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    d: &Dataset,
    protocol: &Protocol,
    method: &Method,
    calibration: Calibration,
    seed: SeedStream,
) -> Result<EvalResult> {
    let cfg = match method {
        Method::Finetune(cfg) => cfg,
        _ => {
            let feats = extract_features(model, d, None, &Extraction::default())?;
            return evaluate_features(&feats, d, protocol, method, calibration, seed);
        }
    };
    let mut accs = Vec::with_capacity(protocol.episodes);
    for i in 0..protocol.episodes {
        let ep = episode_for(d, protocol, seed, i)?;
        let tuned = finetune(model, d, &ep, cfg)?;
        let pred = match calibration {
            Calibration::None => predict(&tuned, d, &ep.query)?,
            _ => {
                let s = extract_features(&tuned, d, Some(&ep.support), &Extraction::default())?;
                let q = extract_features(&tuned, d, Some(&ep.query), &Extraction::default())?;
                prototype_classify(&s, &ep.support_labels, &q, calibration, Metric::Cosine)?.labels
            }
        };
        accs.push(accuracy(&pred, &ep.query_labels));
    }
    Ok(EvalResult::from_accuracies(accs))
}
