//! Seed derivation for deterministic, parallel-safe random streams.
//!
//! Every randomized routine in the crate draws from a ChaCha stream whose seed
//! is derived from a master seed plus fixed tags (node id, feature index,
//! episode index, ...). Work items therefore never share a sequential stream,
//! so results are identical at any thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const TAG_SELECT: u64 = 0x5345_4c45_4354_0001;
pub(crate) const TAG_SAMPLE: u64 = 0x5341_4d50_4c45_0001;
pub(crate) const TAG_HARVEST: u64 = 0x4841_5256_4553_0001;
pub(crate) const TAG_EVAL: u64 = 0x4556_414c_5345_0001;
pub(crate) const TAG_BUILD: u64 = 0x4255_494c_4400_0001;
pub(crate) const TAG_RESET: u64 = 0x5245_5345_5400_0001;
pub(crate) const TAG_MLP: u64 = 0x4d4c_5000_0000_0001;

/// splitmix64 finalizer over a combination of `a` and `b`.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream for (seed, tag).
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}

/// Deterministic stream for (seed, tag, index), used for per-item work.
pub(crate) fn stream3(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, tag), index))
}
