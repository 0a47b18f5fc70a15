//! Deterministic random number generation.
//!
//! Every stochastic operation in the crate draws from a [`SimRng`], a
//! ChaCha stream cipher with 8 rounds (`rand_chacha::ChaCha8Rng`) seeded
//! from a single `u64` through `SeedableRng::seed_from_u64`. Standard normal
//! variates come from `rand_distr::StandardNormal` (ziggurat method).
//!
//! Independent streams for Monte Carlo replications are derived from a root
//! seed with [`derive_seed`], which feeds `root + stream * 0x9E3779B97F4A7C15`
//! through the SplitMix64 finalizer.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer applied to `root + stream * golden_gamma`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal_vector(dim: usize, rng: &mut SimRng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..1000).map(|s| derive_seed(42, s)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
        assert_eq!(derive_seed(42, 7), derive_seed(42, 7));
        assert_ne!(derive_seed(42, 7), derive_seed(43, 7));
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = rng_from_seed(9);
        let mut b = rng_from_seed(9);
        assert_eq!(
            standard_normal_vector(16, &mut a),
            standard_normal_vector(16, &mut b)
        );
    }
}
