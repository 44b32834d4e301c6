//! Seeded randomness.
//!
//! Every stochastic component takes an explicit generator. Independent
//! streams are derived from a master seed with a counter-based split so that
//! work can be reordered or parallelized without changing any draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;

pub type DiffRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of stream `stream` from `master`.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    mix64(mix64(master) ^ mix64(stream.wrapping_add(0xA5A5_A5A5)))
}

pub fn rng_from_seed(seed: u64) -> DiffRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for stream `stream` of `master`.
pub fn stream(master: u64, stream: u64) -> DiffRng {
    rng_from_seed(split_seed(master, stream))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape is consistent by construction")
}

/// Source of the standard-normal increments consumed by the reverse sampler.
pub trait NoiseSource {
    fn next_normal(&mut self) -> f64;
}

impl NoiseSource for DiffRng {
    fn next_normal(&mut self) -> f64 {
        normal(self)
    }
}

/// Noise source that always yields zero. Turns the sampler into the
/// deterministic drift-only integrator.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn next_normal(&mut self) -> f64 {
        0.0
    }
}
