//! Seed derivation.
//!
//! Every random stream in the crate is derived from a single master seed
//! through a path of integers, e.g. `derive(master, &[stage::FRT, b])` for
//! randomization draw `b`. The same path always yields the same stream, so
//! any sub-result can be reproduced in isolation and results do not depend
//! on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stage identifiers used as the first path element.
pub mod stage {
    pub const CONFORMAL: u64 = 1;
    pub const BOOTSTRAP: u64 = 2;
    pub const FRT: u64 = 3;
    pub const PIPELINE: u64 = 4;
    pub const SIMULATION: u64 = 5;
    pub const TRUTH: u64 = 6;
    pub const REGION: u64 = 7;
    pub const OBSERVED: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` along `path`.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0xA076_1D64_78BD_642F))))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(master: u64, path: &[u64]) -> Rng {
    rng(derive(master, path))
}
