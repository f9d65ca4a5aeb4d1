//! Deterministic RNG plumbing.
//!
//! Every random choice in the crate flows through a `ChaCha8Rng` seeded
//! either directly from a config seed or from [`derive_seed`], which mixes a
//! global seed with a stream index. Per-example work (attack restarts, LiSSA
//! repeats) gets its own derived stream so that parallel execution order
//! cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a global seed with a stream index into an independent seed.
///
/// Splitmix64 finalizer over `global ^ (stream * odd constant)`; cheap,
/// stateless, and good enough to decorrelate neighboring streams.
pub fn derive_seed(global: u64, stream: u64) -> u64 {
    let mut z = global ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeds the crate's standard generator.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_deterministic() {
        assert_eq!(derive_seed(42, 7), derive_seed(42, 7));
    }

    #[test]
    fn neighboring_streams_differ() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        assert_ne!(a, b);
        // and differ in many bits, not just the low ones
        assert!((a ^ b).count_ones() > 8);
    }

    #[test]
    fn different_globals_differ() {
        assert_ne!(derive_seed(1, 5), derive_seed(2, 5));
    }
}
