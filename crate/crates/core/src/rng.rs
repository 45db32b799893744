//! Seeded random streams.
//!
//! All randomness flows from explicit `u64` seeds. Independent streams (per
//! worker, per data split, per purpose) are derived with [`derive_seed`],
//! which mixes the base seed and a stream id through SplitMix64. The mapping
//! is fixed, so a `(seed, stream)` pair always yields the same generator.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` under base seed `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Named streams used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TASK: u64 = 2;
    pub const TRAIN_DATA: u64 = 3;
    pub const EVAL_DATA: u64 = 4;
    pub const PROBE_DATA: u64 = 5;
    pub const BATCHES: u64 = 6;
    pub const NEGATIVES: u64 = 7;
    pub const EVAL_NEGATIVES: u64 = 8;
    pub const SUPERVISED: u64 = 9;
    pub const PROBE_FIT: u64 = 10;
    pub const WORKER_BASE: u64 = 1000;
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.values_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

pub fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.values_mut() {
        *v = normal(rng);
    }
    t
}
