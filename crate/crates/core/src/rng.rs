//! Seed derivation and the few random draws the pipeline needs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives an independent stream from a base seed and a list of labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update(l.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn rng_from(seed: u64, labels: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, labels))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Rounds a value to the nearest `f32`, the on-disk precision of every array.
#[inline]
pub fn to_f32_precision(x: f64) -> f64 {
    x as f32 as f64
}

pub fn round_slice_f32(xs: &mut [f64]) {
    for x in xs {
        *x = to_f32_precision(*x);
    }
}

/// SHA-256 over the little-endian bytes of a sequence of f64 slices.
pub fn hash_slices<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        for v in p {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
