//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is
//! derived from the run seed plus a path of integer tags (chain, sweep,
//! stage, unit, ...). Output therefore does not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a base seed with a path of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tags: &[u64]) -> SimRng {
    rng_from(derive_seed(base, tags))
}

/// Stage tags used by the samplers.
pub mod stage {
    pub const INIT: u64 = 1;
    pub const RESIDUAL_ASSIGN: u64 = 10;
    pub const RESIDUAL_STICKS: u64 = 11;
    pub const RESIDUAL_ATOMS: u64 = 12;
    pub const TRAJ_ASSIGN: u64 = 20;
    pub const COMPONENT_PROBS: u64 = 21;
    pub const FLAT_ATOMS: u64 = 22;
    pub const GP_ATOMS: u64 = 23;
    pub const TRAJ_STICKS: u64 = 24;
    pub const CHAIN: u64 = 30;
    pub const SIM_UNIT: u64 = 40;
    pub const SIM_NOISE: u64 = 41;
    pub const SIM_SIGNAL: u64 = 42;
    pub const SIM_RESIDUAL_G: u64 = 43;
    pub const IMPORTANCE: u64 = 50;
}
