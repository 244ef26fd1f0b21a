use rand::seq::index;
use rand::Rng;

use super::Dataset;
use crate::error::{CoreError, Result};

/// A k-way n-shot task. Labels are episode-local (`0..k`), in the order the
/// classes were drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    /// Dataset class of each episode label.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

pub fn sample_episode<R: Rng + ?Sized>(d: &Dataset, k: usize, n: usize, q: usize, rng: &mut R) -> Result<Episode> {
    if k == 0 || n == 0 {
        return Err(crate::error::invalid("sample_episode", format!("k={k}, n={n} must be positive")));
    }
    let by_class = d.class_indices();
    let eligible: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if eligible.len() < k {
        return Err(CoreError::InsufficientClasses { needed: k, available: eligible.len() });
    }
    if let Some(&c) = eligible.iter().find(|&&c| by_class[c].len() < n + q) {
        return Err(CoreError::InsufficientSamples { class: c, needed: n + q, available: by_class[c].len() });
    }
    let classes: Vec<usize> = index::sample(rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
    let mut ep = Episode {
        k,
        n,
        q,
        classes: classes.clone(),
        support: Vec::with_capacity(k * n),
        support_labels: Vec::with_capacity(k * n),
        query: Vec::with_capacity(k * q),
        query_labels: Vec::with_capacity(k * q),
    };
    for (label, &c) in classes.iter().enumerate() {
        let members = &by_class[c];
        let picked = index::sample(rng, members.len(), n + q);
        for (j, i) in picked.into_iter().enumerate() {
            if j < n {
                ep.support.push(members[i]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(members[i]);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}
