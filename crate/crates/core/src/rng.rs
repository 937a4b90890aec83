//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose key is
//! derived from a master seed and a tuple of integers (layer index,
//! iteration, image index...). Draws therefore never depend on evaluation
//! order or thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `key` into `seed`. Distinct keys give unrelated child seeds.
pub fn derive(seed: u64, key: u64) -> u64 {
    splitmix(splitmix(seed) ^ key.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Child seed for a multi-part key.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &k| derive(s, k))
}

pub fn stream(seed: u64, key: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(seed, key))
}

pub fn stream_path(seed: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_path(seed, path))
}

pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Stream, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
