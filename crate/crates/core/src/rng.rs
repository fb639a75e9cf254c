//! Seed derivation. Every stochastic component draws from its own
//! `ChaCha8Rng` whose seed is a pure function of (base seed, stream, index).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index into a new seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    rng_from(derive_seed(base, stream, index))
}

pub(crate) mod stream {
    pub const EPISODE_RESET: u64 = 1;
    pub const EPISODE_EXPERT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const INIT: u64 = 4;
    pub const ROLLOUT_RESET: u64 = 5;
    pub const ROLLOUT_ACTION: u64 = 6;
    pub const SWEEP_DRAW: u64 = 7;
    pub const PROBE: u64 = 8;
}
