//! Seeded random streams and weight initialisers.
//!
//! All randomness comes from ChaCha8 keyed by a run seed, with a separate
//! stream per purpose, so the same seed gives the same numbers everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub mod streams {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SYNTHETIC: u64 = 3;
    pub const PRICES: u64 = 4;
}

pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, as a trainable leaf.
pub fn uniform_param(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::param(data, shape)
}

pub fn normal_param(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::param(data, shape)
}

pub fn constant_param(shape: &[usize], value: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(vec![value; n], shape)
}
