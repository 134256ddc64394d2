//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by a seed mixed from (master seed, purpose, indices), so
//! results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a sequence of salts.
pub fn derive(seed: u64, salts: &[u64]) -> u64 {
    salts.iter().fold(mix64(seed), |acc, s| mix64(acc ^ mix64(*s)))
}

/// Stable 64-bit hash of a string label (FNV-1a).
pub fn label(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, purpose: &str, salts: &[u64]) -> ChaCha8Rng {
    let mut all = vec![label(purpose)];
    all.extend_from_slice(salts);
    rng(derive(seed, &all))
}
