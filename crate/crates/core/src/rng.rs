//! Reproducible random-stream derivation.
//!
//! Every source of randomness in the crate is a ChaCha stream whose seed is
//! derived from a root seed plus a list of integer ids (image index, sample
//! index, epoch, ...). Streams derived with distinct id paths are
//! statistically independent, so work can be distributed across threads
//! without changing any result.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; full-period bijective mixer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a root seed and an id path down to a single stream seed.
pub fn stream_id(seed: u64, ids: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x517c_c1b7_2722_0a95);
    for &id in ids {
        state = splitmix64(state ^ splitmix64(id));
    }
    state
}

/// Derive an independent counter-based generator for the given id path.
pub fn stream(seed: u64, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_id(seed, ids))
}
