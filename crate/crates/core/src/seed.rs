//! Seed derivation for independent, reproducible random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by a
//! tuple such as `(global_seed, step, task)`. Work items therefore own their
//! generator, and the values they draw do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a seed together with a path of stream identifiers.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Generator for the stream `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

/// Stream tags keep unrelated consumers of the same `(seed, step)` apart.
pub mod tag {
    pub const INIT_CONDITION: u64 = 0x11;
    pub const INIT_BACKBONE: u64 = 0x12;
    pub const META_BATCH: u64 = 0x21;
    pub const CONTRASTIVE: u64 = 0x22;
    pub const FIXED_TASKS: u64 = 0x23;
    pub const EVAL_NOISE: u64 = 0x31;
    pub const EVAL_SUPPORT: u64 = 0x32;
    pub const FEATURES: u64 = 0x41;
    pub const VALIDATION: u64 = 0x51;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
