//! Keyed deterministic RNG streams.
//!
//! Every random draw in this crate comes from a stream derived by hashing a
//! root seed together with a small integer key path (rollout index, step
//! counter, purpose tag). Two consequences:
//!
//! - results are reproducible from the seed alone, at any thread count,
//!   because no stream is shared across work items;
//! - paired comparisons (common random numbers) fall out for free: two
//!   rollouts that share a seed and a key path see the same draws.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams. Distinct constants keep unrelated
/// draws from aliasing each other.
pub mod salt {
    /// Feature noise at a token position.
    pub const FEATURE: u64 = 0x01;
    /// Environment embedding matrix.
    pub const EMBEDDING: u64 = 0x02;
    /// Error-injection draw for the n-th statement step.
    pub const ERROR: u64 = 0x03;
    /// Fix draw for the n-th reflection step.
    pub const FIX: u64 = 0x04;
    /// Branch-quality resample for the n-th divergence step.
    pub const QUALITY: u64 = 0x05;
    /// Token-count draw for the n-th step of a class.
    pub const TOKENS: u64 = 0x06;
    /// Default-policy operator choice at a step index.
    pub const OP_CHOICE: u64 = 0x07;
    /// Search-policy operator sampling within a rollout.
    pub const SELECT: u64 = 0x08;
    /// Minibatch shuffling per training epoch.
    pub const SHUFFLE: u64 = 0x09;
    /// Random head initialization.
    pub const INIT: u64 = 0x0a;
    /// Query-set generation.
    pub const QUERY: u64 = 0x0b;
    /// Monte Carlo aggregation iteration.
    pub const MONTE_CARLO: u64 = 0x0c;
    /// Per-rollout derivation from a batch seed.
    pub const ROLLOUT: u64 = 0x0d;
}

/// SplitMix64 finalizer; the standard 64-bit avalanche.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Fold a key into a seed. Order-sensitive, so `(a, b)` and `(b, a)`
/// derive different streams.
#[inline]
pub fn mix(seed: u64, key: u64) -> u64 {
    mix64(seed ^ mix64(key))
}

/// Derive a ChaCha8 stream from a seed and a key path.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = seed;
    for &k in keys {
        h = mix(h, k);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// One uniform draw in `[0, 1)` from the keyed stream.
pub fn unit(seed: u64, keys: &[u64]) -> f64 {
    stream(seed, keys).gen::<f64>()
}

/// Stable 64-bit hash of a string, for keying streams by query id.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}
