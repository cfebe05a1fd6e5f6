//! Counter-based splittable randomness.
//!
//! Every random decision in the crate is keyed by `(seed, purpose tag, index)`
//! rather than drawn from one long mutable stream. Two consequences:
//! sample `i` of a dataset can be generated without generating samples
//! `0..i`, and adding a new consumer of randomness never perturbs existing
//! ones. Streams are backed by ChaCha8, which is stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Good avalanche, cheap, stable.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a 64-bit key from `(seed, tag, index)`.
///
/// The chained mixing keeps the three inputs from cancelling each other:
/// `key(s, t, i)` differs for any change in any component.
pub fn key(seed: u64, tag: &str, index: u64) -> u64 {
    let h = splitmix64(seed ^ 0x517c_c1b7_2722_0a95);
    let h = splitmix64(h ^ fnv1a(tag.as_bytes()));
    splitmix64(h ^ index)
}

/// A ChaCha8 stream seeded from [`key`]. Use when more than one draw is needed.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, tag, index))
}

/// Uniform draw in `[0, n)` from a single derived key.
///
/// The modulo bias is below `n / 2^64`, negligible for every `n` used here.
pub fn uniform_index(seed: u64, tag: &str, index: u64, n: u64) -> u64 {
    debug_assert!(n > 0);
    key(seed, tag, index) % n
}
