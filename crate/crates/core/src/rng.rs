//! Seed derivation.
//!
//! Every random stream is a `ChaCha8Rng` seeded from `derive_seed(global,
//! path)`, where `path` is a list of counters naming the stream (for example
//! `[run index, purpose]`). The derived seed folds each counter into the
//! state with a SplitMix64 finalizer, so streams do not depend on the order
//! in which chains are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

/// Stream tags used by the samplers and the experiment runner.
pub mod stream {
    /// Initial noise and per-step posterior noise.
    pub const CHAIN: u64 = 1;
    /// Re-noised copies of the input used by combine-noisy.
    pub const RENOISE: u64 = 2;
    /// Ground-truth image drawn from the prior.
    pub const IMAGE: u64 = 3;
    pub const MASK: u64 = 4;
    pub const TRAINING: u64 = 5;
    pub const INIT: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(global), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng_for(global: u64, path: &[u64]) -> ChainRng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_path_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        assert_ne!(derive_seed(7, &[]), derive_seed(7, &[0]));
    }

    #[test]
    fn streams_reproduce() {
        let a: Vec<u64> = rng_for(1, &[3]).random_iter().take(4).collect();
        let b: Vec<u64> = rng_for(1, &[3]).random_iter().take(4).collect();
        assert_eq!(a, b);
    }
}
