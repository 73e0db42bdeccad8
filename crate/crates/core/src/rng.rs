//! Deterministic seed derivation.
//!
//! Every stochastic component takes a `u64` seed. Sub-seeds are derived from a
//! base seed plus a purpose tag so that independent components never share an
//! RNG stream and runs are exactly reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a sub-seed from `base` and a purpose tag (FNV-1a over the tag,
/// folded with the base through SplitMix64).
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(base ^ h)
}

/// One round of SplitMix64; scrambles correlated seeds apart.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Seeded RNG for a (base, tag) pair.
pub fn rng_for(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}
