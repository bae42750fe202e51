//! Seeded randomness shared by initialization, shuffling and data synthesis.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream from `rng` without disturbing its sibling streams.
pub fn fork(rng: &mut Rng) -> Rng {
    Rng::seed_from_u64(rng.next_u64())
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rand::Rng::random::<f64>(rng)
}

pub fn below(rng: &mut Rng, n: usize) -> usize {
    rand::Rng::random_range(rng, 0..n)
}

pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    rand::seq::SliceRandom::shuffle(items, rng);
}
