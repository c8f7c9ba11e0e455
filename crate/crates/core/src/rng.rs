//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

pub type Rng = ChaCha8Rng;

/// Stream identifiers.
pub mod stream {
    pub const ENCODER_INIT: u64 = 1;
    pub const DECODER_INIT: u64 = 2;
    pub const AFR_INIT: u64 = 3;
    pub const HEAD_INIT: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const MASKS: u64 = 6;
    pub const CLASSIFIER_INIT: u64 = 7;
    pub const SUBSAMPLE: u64 = 8;
    pub const DISRUPT: u64 = 9;
    pub const EPISODES: u64 = 10;
    pub const SYNTHETIC: u64 = 11;
    pub const GRADCHECK: u64 = 12;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Xavier/Glorot uniform for an `[fan_in, fan_out]` weight.
pub fn xavier_uniform<T: Real>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    use rand::Rng as _;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("shape matches")
}
