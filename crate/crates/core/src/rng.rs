//! Deterministic seed fan-out.
//!
//! One master seed is split into independent streams via a counter-based
//! mix, so pretraining, trajectory sampling, critic updates, and estimators
//! each get their own reproducible generator. Identical master seed and
//! stream path always yield the same stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels for the top level of the fan-out.
pub mod stream {
    pub const PRETRAIN: u64 = 0x01;
    pub const TRAJECTORIES: u64 = 0x02;
    pub const CRITIC: u64 = 0x03;
    pub const OBJECTIVE: u64 = 0x04;
    pub const SAMPLES: u64 = 0x05;
    pub const DATA: u64 = 0x06;
    pub const INIT: u64 = 0x07;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a stream path.
pub fn split_seed(master: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ 0xa076_1d64_78bd_642f);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p));
    }
    s
}

/// A ChaCha generator for the given stream path.
pub fn seeded_rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(master, path))
}
