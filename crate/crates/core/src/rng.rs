//! Deterministic stream derivation for parallel Monte Carlo work.
//!
//! Every random task (a simulation replication, a bootstrap replicate) gets
//! its own ChaCha stream keyed by `(parent_seed, index)`. Streams are derived
//! by counter, never by drawing from a shared generator, so results do not
//! depend on thread scheduling or the degree of parallelism.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates consecutive seed/index pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a task index.
pub fn child_seed(parent: u64, index: u64) -> u64 {
    mix(parent ^ mix(index.wrapping_mul(0xa24b_aed4_963e_e407)))
}

/// Build the generator for the task identified by `(parent, index)`.
pub fn stream(parent: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(parent, index))
}
