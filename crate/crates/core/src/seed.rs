//! Counter-based seed derivation.
//!
//! Every random stream in an experiment is keyed by `(master, run index,
//! stream id)` and mixed through SplitMix64, so a stream never depends on
//! how many other streams were consumed before it. Serial and parallel
//! runs therefore draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a counter.
pub fn derive(parent: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ counter.wrapping_mul(GOLDEN))
}

/// Seed of run `index` under `master`.
pub fn run_seed(master: u64, index: u64) -> u64 {
    derive(master, index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the run seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    rng(derive(seed, stream))
}
