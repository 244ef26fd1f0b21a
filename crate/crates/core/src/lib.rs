//! Interpolating-normalization layers, toy backbones, an episodic few-shot
//! harness and representation-landscape probes, on top of `flor-tensor`.

pub mod backbone;
pub mod data;
mod error;
pub mod fewshot;
pub mod norm;
pub mod optim;
pub mod params;
pub mod probes;
pub mod rng;

pub use error::{CoreError, Result};
