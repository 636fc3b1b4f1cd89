//! Seeded weight initialization.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// splitmix64 step; used to derive independent sub-seeds from a master
/// seed without correlation between streams.
pub fn mix_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from(master: u64, tag: u64) -> ChaCha12Rng {
    use rand::SeedableRng;
    ChaCha12Rng::seed_from_u64(mix_seed(master, tag))
}

/// Kaiming-uniform with bound 1/sqrt(fan_in), the usual conv default.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}
