//! Seeded random streams.
//!
//! Every stochastic component takes an explicit seed and derives independent
//! sub-streams with [`derive_seed`], so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(seed, stream)`. Distinct streams give
/// statistically independent generators.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ mix(stream.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(1)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    rng_from(derive_seed(seed, stream))
}

/// Stream tags, so different components never share a derived stream.
pub(crate) mod tag {
    pub const FOREST_TREE: u64 = 0x1000_0000;
    pub const CV_FOLD: u64 = 0x2000_0000;
    pub const SMOTE_CLASS: u64 = 0x3000_0000;
    pub const ADASYN_CLASS: u64 = 0x4000_0000;
    pub const UNDERSAMPLE: u64 = 0x5000_0000;
    pub const TRAIN_SPLIT: u64 = 0x6000_0000;
    pub const TRAIN_SHUFFLE: u64 = 0x7000_0000;
    pub const MODEL_INIT: u64 = 0x8000_0000;
    pub const KFOLD: u64 = 0x9000_0000;
    pub const SYNTH: u64 = 0xa000_0000;
}
