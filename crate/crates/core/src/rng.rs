//! Seeding helpers. Every random draw in the crate goes through a
//! ChaCha8 stream seeded either directly or derived from a (seed, path)
//! pair, so runs are reproducible and adding or removing a sibling
//! module never shifts another module's initialization.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named component (FNV-1a over the
/// path, mixed with the base seed).
pub fn for_path(seed: u64, path: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
