//! Per-component seed derivation.
//!
//! Every random stream is seeded with `master + fnv1a(tag)` (wrapping), so a
//! single configured seed fixes all randomness while unrelated components
//! draw from unrelated streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a hash of `tag`.
pub fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive(master: u64, tag: &str) -> u64 {
    master.wrapping_add(fnv1a(tag))
}

pub fn rng(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag))
}
