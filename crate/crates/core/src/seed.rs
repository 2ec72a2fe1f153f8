//! Seed derivation. Every random stream in a run is a pure function of the
//! base seed and a short tag path, so schedules and thread counts never
//! change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0xA5A5))))
}

pub fn stream(base: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive(base, tags))
}

/// Tags naming independent streams.
pub mod tag {
    pub const AGENT: u64 = 1;
    pub const TRAINER: u64 = 2;
    pub const RIDES: u64 = 3;
    pub const TEST_RIDES: u64 = 4;
    pub const TRAJECTORIES: u64 = 5;
    pub const INIT: u64 = 6;
    pub const FAULTS: u64 = 7;
    pub const CFL_SELECT: u64 = 8;
    pub const LEDGER: u64 = 9;
}
