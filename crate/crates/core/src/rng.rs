//! Seeded random streams. Every source of randomness in a run is derived
//! from one root seed plus a stream name, so changing e.g. the shuffle
//! schedule cannot perturb initialization draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stream name, mixed into the seed.
fn mix(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// A deterministic generator for the named sub-stream of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, name))
}

/// Derive a child seed, e.g. one per group or per trial.
pub fn child_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(mix(seed, name) ^ splitmix64(index))
}
