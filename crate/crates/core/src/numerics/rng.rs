//! Seeded, splittable randomness. Every random draw in the crate goes through
//! a [`SeedStream`] so runs are reproducible from a single `u64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `parent` and a stream tag.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    mix64(parent ^ mix64(tag.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Derives a child seed from a string label, e.g. a parameter name.
pub fn derive_seed_str(parent: u64, label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive_seed(parent, h)
}

/// A 64-bit seed that can be split into named child streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream(pub u64);

impl SeedStream {
    pub fn split(self, tag: u64) -> SeedStream {
        SeedStream(derive_seed(self.0, tag))
    }

    pub fn split_str(self, label: &str) -> SeedStream {
        SeedStream(derive_seed_str(self.0, label))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

pub fn normal(rng: &mut impl Rng) -> f32 {
    rng.sample::<f64, _>(StandardNormal) as f32
}

/// Normal sample with standard deviation `std`, resampled outside ±2·std.
pub fn truncated_normal(rng: &mut impl Rng, std: f32) -> f32 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
