//! Keyed random streams.
//!
//! Every stochastic stage draws from a `ChaCha8Rng` whose seed is a hash of
//! the run seed and a tuple of integers naming the stream, so stages and
//! records never share state and reordering work cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct tags keep otherwise equal key tuples apart.
pub(crate) mod tag {
    pub const SHUFFLE: u64 = 1;
    pub const TRAIN_NOISE: u64 = 2;
    pub const VALID_NOISE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const LANGEVIN: u64 = 5;
    pub const GROUND_TRUTH: u64 = 6;
    pub const ATTACK: u64 = 7;
    pub const BASELINE: u64 = 8;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from `seed` and the key tuple.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    key.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Independent generator for `(seed, key...)`.
pub fn substream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}
