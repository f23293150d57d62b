//! Seed derivation. Every random draw in the crate goes through a ChaCha
//! stream keyed by a base seed plus a list of tags, so streams for different
//! purposes never overlap and results are stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `tags` into `seed`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags, one per consumer.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const DATA: u64 = 4;
    pub const CONTAMINATION: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const PAIRS: u64 = 7;
    pub const ENCODER_INIT: u64 = 8;
}
