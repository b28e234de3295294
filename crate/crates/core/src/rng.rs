//! Seeded random streams.
//!
//! Every generator draws from its own ChaCha8 stream selected by a purpose
//! tag, so adding a generator never shifts the draws of another.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 64-bit FNV-1a hash of a tag.
pub fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream for `(seed, tag)`.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(tag));
    rng
}

/// Seed of the `index`-th derived trial (splitmix64 of the pair).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Matrix with iid `N(0, std^2)` entries, filled column by column.
pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Vector with iid `N(0, std^2)` entries.
pub fn gaussian_vector<R: Rng>(rng: &mut R, len: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Standard normal draw.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
