//! Deterministic seed derivation. Every random draw in the crate comes from
//! a generator keyed by `(base seed, stream labels...)`, which keeps runs
//! reproducible and lets a resumed run pick up the exact same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix(base), |acc, &l| splitmix(acc ^ splitmix(l)))
}

pub fn rng(base: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, labels))
}

/// Stream labels, kept distinct so unrelated draws never share a generator.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const TRAJECTORY: u64 = 2;
    pub const SHAPE: u64 = 3;
    pub const MIXTURE: u64 = 4;
    pub const MASK: u64 = 5;
    pub const INIT: u64 = 6;
    pub const STEP: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const SAMPLE: u64 = 9;
    pub const CALIB: u64 = 10;
    pub const DISC: u64 = 11;
    pub const EVAL: u64 = 12;
}
