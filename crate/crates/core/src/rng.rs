//! Seeded randomness.
//!
//! Every random draw in the crate comes from `ChaCha8Rng` seeded through
//! `SeedableRng::seed_from_u64`. Independent streams are derived from a
//! base seed with [`derive_seed`] (a SplitMix64 finalizer over the seed and
//! a stream tag), so adding a consumer never shifts another consumer's draws.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let tag = stream
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
    mix64(seed ^ mix64(tag))
}

/// Uniformly samples `k` distinct elements of `pool`, returned in ascending order.
pub fn sample_sorted(pool: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = pool.choose_multiple(rng, k).copied().collect();
    picked.sort_unstable();
    picked
}
