use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    #[default]
    None,
    /// Subtract the support-set mean from every feature.
    Inductive,
    /// Subtract the query-set mean from every feature.
    Transductive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Per-query similarity to each class (negative squared distance for
    /// the Euclidean metric).
    pub scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub prototypes: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

fn mean_of(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, &b)| *a += b);
    }
    let n = rows.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn check_dims(support: &[Vec<f64>], labels: &[usize], query: &[Vec<f64>]) -> Result<usize> {
    if support.is_empty() {
        return Err(invalid("prototype_classify", "empty support set"));
    }
    if support.len() != labels.len() {
        return Err(invalid("prototype_classify", format!("{} support features, {} labels", support.len(), labels.len())));
    }
    let d = support[0].len();
    if let Some(r) = support.iter().chain(query).find(|r| r.len() != d) {
        return Err(invalid("prototype_classify", format!("feature of dim {} among dim {d}", r.len())));
    }
    Ok(d)
}

/// Apply a calibration to support and query features.
pub fn calibrate(support: &[Vec<f64>], query: &[Vec<f64>], calibration: Calibration) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = support.first().or(query.first()).map_or(0, Vec::len);
    let center = match calibration {
        Calibration::None => return (support.to_vec(), query.to_vec()),
        Calibration::Inductive => mean_of(support, d),
        Calibration::Transductive => mean_of(query, d),
    };
    let shift = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.iter().zip(&center).map(|(a, c)| a - c).collect()).collect()
    };
    (shift(support), shift(query))
}

/// Per-class mean of the support features; classes are `0..=max label`.
pub fn prototypes(support: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let d = check_dims(support, labels, &[])?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (r, &l) in support.iter().zip(labels) {
        sums[l].iter_mut().zip(r).for_each(|(a, &b)| *a += b);
        counts[l] += 1;
    }
    for (c, (s, &n)) in sums.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(CoreError::EmptyClass(c.to_string()));
        }
        s.iter_mut().for_each(|a| *a /= n as f64);
    }
    Ok(sums)
}

fn score(q: &[f64], p: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => -q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
        Metric::Cosine => {
            let dot: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nq == 0.0 || np == 0.0 {
                0.0
            } else {
                dot / (nq * np)
            }
        }
    }
}

/// Score every query against every prototype; ties go to the lower class.
pub fn assign(protos: &[Vec<f64>], query: &[Vec<f64>], metric: Metric) -> Prediction {
    let scores: Vec<Vec<f64>> = query.iter().map(|q| protos.iter().map(|p| score(q, p, metric)).collect()).collect();
    let labels = scores
        .iter()
        .map(|s| {
            s.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best }).0
        })
        .collect();
    Prediction { labels, scores }
}

/// Nearest-prototype classification of `query` after calibration.
pub fn prototype_classify(
    support: &[Vec<f64>],
    support_labels: &[usize],
    query: &[Vec<f64>],
    calibration: Calibration,
    metric: Metric,
) -> Result<Prediction> {
    check_dims(support, support_labels, query)?;
    let (s, q) = calibrate(support, query, calibration);
    let protos = prototypes(&s, support_labels)?;
    Ok(assign(&protos, &q, metric))
}

/// Alternate pseudo-labelling the queries and recomputing each prototype
/// as the mean of its support and pseudo-labelled query features. Stops
/// when the labels repeat, when no prototype moves more than `tol`
/// (Euclidean), or after `max_iters` rounds.
pub fn transductive_refine(
    support: &[Vec<f64>],
    support_labels: &[usize],
    prototypes: &[Vec<f64>],
    query: &[Vec<f64>],
    metric: Metric,
    max_iters: usize,
    tol: f64,
) -> Result<Refinement> {
    if max_iters == 0 {
        return Err(invalid("transductive_refine", "max_iters must be at least 1"));
    }
    if support.len() != support_labels.len() {
        return Err(invalid("transductive_refine", "support features and labels differ in length"));
    }
    let k = prototypes.len();
    if let Some(&l) = support_labels.iter().find(|&&l| l >= k) {
        return Err(invalid("transductive_refine", format!("support label {l} with {k} prototypes")));
    }
    let mut protos = prototypes.to_vec();
    let mut labels = assign(&protos, query, metric).labels;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut next = Vec::with_capacity(k);
        for (c, old) in protos.iter().enumerate() {
            let members: Vec<Vec<f64>> = support
                .iter()
                .zip(support_labels)
                .filter(|(_, &l)| l == c)
                .chain(query.iter().zip(&labels).filter(|(_, &l)| l == c))
                .map(|(r, _)| r.clone())
                .collect();
            next.push(if members.is_empty() { old.clone() } else { mean_of(&members, old.len()) });
        }
        let shift = protos
            .iter()
            .zip(&next)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        protos = next;
        let relabel = assign(&protos, query, metric).labels;
        let same = relabel == labels;
        labels = relabel;
        if same || shift <= tol {
            converged = true;
            break;
        }
    }
    Ok(Refinement { prototypes: protos, labels, iterations, converged })
}
