//! Deterministic seed derivation.
//!
//! Every stochastic component (RUE placement, shadow fading, optimizer
//! populations, policy sampling) draws from its own stream derived from the
//! master experiment seed, so reruns are bit-identical and components can be
//! re-ordered without perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from a master seed, a component tag, and an index.
///
/// Uses an FNV-1a pass over the tag followed by a splitmix64 finalizer.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    splitmix64(master ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Seeded RNG for a named component stream.
pub fn rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a byte slice, used for config hashes and parameter digests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}
