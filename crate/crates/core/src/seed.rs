//! Stable per-item seed derivation.
//!
//! Parallel jobs draw their randomness from a generator seeded by
//! `(global seed, item id)`, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the id bytes, mixed with the global seed through splitmix64.
pub fn derive_seed(global: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(global))
}

pub fn rng_for(global: u64, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, id))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
