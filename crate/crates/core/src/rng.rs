//! Seeded random streams. Every consumer derives its own stream from a seed
//! and a fixed stream id so unrelated draws never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const CLASS_GEOMETRY: u64 = 1;
    pub const TRAIN_SPLIT: u64 = 2;
    pub const TEST_SPLIT: u64 = 3;
    pub const INIT: u64 = 10;
    pub const BATCHES: u64 = 11;
    pub const SUBSET: u64 = 12;
    pub const MIX: u64 = 13;
    pub const SYNTHETIC_INIT: u64 = 20;
    pub const DISTILL: u64 = 21;
    pub const PROBES: u64 = 30;
    pub const POOLS: u64 = 40;
    pub const SEARCH: u64 = 41;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic child seed, for fanning one seed out to many jobs.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
