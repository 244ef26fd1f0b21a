//! Seed streams.
//!
//! Every random quantity comes from ChaCha8 (the `rand_chacha` crate) keyed
//! by a 64-bit seed through `seed_from_u64`. Streams form a tree: child `i`
//! of seed `s` is the first `u64` drawn from ChaCha8 keyed by `s` with its
//! stream id set to `i`. Children of distinct ids are independent and do not
//! depend on how much the parent has been consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn split(self, id: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(self.0);
        r.set_stream(id);
        Self(r.next_u64())
    }

    /// Split along a path of ids.
    pub fn path(self, ids: &[u64]) -> Self {
        ids.iter().fold(self, |s, &i| s.split(i))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Stream ids for the top-level purposes of an experiment.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const NOISE: u64 = 7;
}
