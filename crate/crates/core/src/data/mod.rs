//! In-memory image datasets, the synthetic two-domain generator, image-folder
//! ingestion and episodic sampling.

mod episode;
mod folder;
mod synth;

pub use episode::{sample_episode, Episode};
pub use folder::{ingest_folder, write_folder};
pub use synth::{generate_synthetic, two_domain_benchmark, Benchmark, BenchmarkSpec, DomainStyle, SynthSpec};

use flor_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Novel,
}

/// Images of shape `[c, h, w]` with values in `[0, 1]`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
    domains: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(shape: [usize; 3], class_names: Vec<String>, split: Split) -> Self {
        let by_class = vec![Vec::new(); class_names.len()];
        Self {
            shape,
            pixels: Vec::new(),
            labels: Vec::new(),
            domains: Vec::new(),
            by_class,
            class_names,
            domain_names: Vec::new(),
            split,
        }
    }

    pub fn push(&mut self, image: &[f32], label: usize, domain: &str) -> Result<()> {
        let len: usize = self.shape.iter().product();
        if image.len() != len {
            return Err(invalid("dataset", format!("image of {} values, expected {len}", image.len())));
        }
        if label >= self.class_names.len() {
            return Err(invalid("dataset", format!("label {label} with {} classes", self.class_names.len())));
        }
        let d = match self.domain_names.iter().position(|n| n == domain) {
            Some(d) => d,
            None => {
                self.domain_names.push(domain.to_string());
                self.domain_names.len() - 1
            }
        };
        self.by_class[label].push(self.labels.len());
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        self.domains.push(d);
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain(&self, i: usize) -> &str {
        &self.domain_names[self.domains[i]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len: usize = self.shape.iter().product();
        &self.pixels[i * len..(i + 1) * len]
    }

    /// Sample indices of each class.
    pub fn class_indices(&self) -> &[Vec<usize>] {
        &self.by_class
    }

    /// Stack the given samples into `[n, c, h, w]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image(0).len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
        }
        let [c, h, w] = self.shape;
        Tensor::new([indices.len(), c, h, w], data).expect("batch length")
    }

    /// Stack samples after adding a per-sample perturbation.
    pub fn batch_with<T: Scalar>(&self, indices: &[usize], mut perturb: impl FnMut(usize, &mut [f32])) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image(0).len());
        let mut buf = Vec::new();
        for &i in indices {
            buf.clear();
            buf.extend_from_slice(self.image(i));
            perturb(i, &mut buf);
            data.extend(buf.iter().map(|&v| T::of(v as f64)));
        }
        let [c, h, w] = self.shape;
        Tensor::new([indices.len(), c, h, w], data).expect("batch length")
    }
}

/// Class names shared by two datasets; empty when the splits are disjoint.
pub fn shared_classes(a: &Dataset, b: &Dataset) -> Vec<String> {
    a.class_names.iter().filter(|n| b.class_names.contains(n)).cloned().collect()
}
