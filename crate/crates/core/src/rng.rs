//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a seed mixed from the caller's seed and a purpose tag, so
//! runs are reproducible and independent streams never overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slowfast_tensor::{Element, Tensor};

/// SplitMix64 finaliser.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e3779b97f4a7c15).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| mix(acc, p))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

pub fn gaussian<F: Element>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Uniform in `[-bound, bound)`.
pub fn uniform<F: Element>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

pub(crate) mod tags {
    pub const WORLD: u64 = 0x5744;
    pub const START: u64 = 0x5354;
    pub const WALK: u64 = 0x574b;
    pub const EPISODE: u64 = 0x4550;
    pub const INIT: u64 = 0x494e;
    pub const SAMPLE: u64 = 0x534d;
    pub const UPDATE: u64 = 0x5550;
    pub const BATCH: u64 = 0x4241;
    pub const LORA: u64 = 0x4c52;
    pub const OUTER: u64 = 0x4f55;
    pub const EVAL: u64 = 0x4556;
    pub const IDM: u64 = 0x4944;
    pub const BENCH: u64 = 0x424e;
}
