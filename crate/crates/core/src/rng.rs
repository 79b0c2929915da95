//! Deterministic seed derivation.
//!
//! Every random draw in a run is keyed by a tuple of integers (master seed,
//! iteration, direction, ...), so any worker can regenerate the exact stream
//! it needs without sharing a sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of keys into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5_EED0_F6E5_u64, |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Domain tags so streams for different purposes never collide.
pub(crate) mod stream {
    pub const PERTURBATION: u64 = 1;
    pub const EPISODE: u64 = 2;
    pub const LATENT: u64 = 3;
    pub const SCENARIO_SAMPLE: u64 = 4;
    pub const INIT: u64 = 5;
}
