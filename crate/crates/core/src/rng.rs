//! Seeded randomness.
//!
//! All sampling goes through SplitMix64: a counter-based generator whose
//! state advances by the constant 0x9E3779B97F4A7C15 and whose output is
//! finalized by the mixer with multipliers 0xBF58476D1CE4E5B9 and
//! 0x94D049BB133111EB. The same seed yields the same stream on every
//! platform.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64 as Rng64;

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for the `index`-th item of a named sub-stream.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let a = mix(seed.wrapping_add(GOLDEN.wrapping_mul(stream.wrapping_add(1))));
    mix(a ^ mix(index.wrapping_add(GOLDEN)))
}
