//! Root-seed splitting. Every stochastic stage (data, masking, init,
//! dropout, shuffling) draws from its own stream derived from one root seed,
//! so stages can be re-run in isolation and still reproduce bitwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive the seed of a named stage from the root seed.
pub fn derive(root: u64, stage: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(stage)))
}

/// Derive a seed for the `index`-th item of a stage (per-sample streams).
pub fn derive_indexed(root: u64, stage: &str, index: u64) -> u64 {
    splitmix64(derive(root, stage) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng(root: u64, stage: &str) -> Rng {
    Rng::seed_from_u64(derive(root, stage))
}

pub fn rng_indexed(root: u64, stage: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(root, stage, index))
}
