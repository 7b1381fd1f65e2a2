//! Seed derivation for independent random streams.
//!
//! Every stochastic choice in an experiment draws from its own ChaCha stream,
//! keyed by `(base_seed, index, purpose)`, so member trainings never share a
//! stream and results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Data,
    TestSplit,
    Plan,
    Init,
    Shuffle,
    FastInit,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Data => 1,
            Purpose::TestSplit => 2,
            Purpose::Plan => 3,
            Purpose::Init => 4,
            Purpose::Shuffle => 5,
            Purpose::FastInit => 6,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of `(base_seed, index, purpose)`.
pub fn derive_seed(base_seed: u64, index: u64, purpose: Purpose) -> u64 {
    let a = splitmix64(base_seed);
    let b = splitmix64(a ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(b ^ purpose.tag().wrapping_mul(0xA076_1D64_78BD_642F))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(base_seed: u64, index: u64, purpose: Purpose) -> Rng {
    rng_from_seed(derive_seed(base_seed, index, purpose))
}
