//! Stateless counter-based random streams.
//!
//! Every draw is a pure function of a key tuple, e.g. `(seed, neuron id, step)`.
//! No generator state is carried between calls, so the realization a neuron
//! sees never depends on which worker owns it or in what order neurons are
//! visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes an ordered key tuple into 64 bits.
#[inline]
pub fn hash_key(parts: &[u64]) -> u64 {
    let mut h = 0x6a09_e667_f3bc_c908u64;
    for &p in parts {
        h = mix64(h.wrapping_add(GOLDEN) ^ mix64(p.wrapping_add(GOLDEN)));
    }
    h
}

/// Uniform draw in the open interval (0, 1) with 52 bits of resolution.
#[inline]
pub fn unit_open(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Standard normal draw keyed by `parts` (Box-Muller on two derived uniforms).
#[inline]
pub fn normal(parts: &[u64]) -> f64 {
    let h = hash_key(parts);
    let u1 = unit_open(mix64(h ^ 0x5851_f42d_4c95_7f2d));
    let u2 = unit_open(mix64(h ^ 0x1405_7b7e_f767_814f));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform (0,1) draw keyed by `parts`.
#[inline]
pub fn uniform(parts: &[u64]) -> f64 {
    unit_open(mix64(hash_key(parts)))
}

/// A sequential generator for one keyed shard (one neuron's synapse picks,
/// one voxel's geometry, ...). Seeding from the key keeps shards independent
/// of generation order.
pub fn shard_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_key(parts))
}

/// Stream domains, so identical numeric keys in different roles never collide.
pub mod domain {
    pub const OU: u64 = 1;
    pub const SYNAPSES: u64 = 2;
    pub const CONDUCTANCE: u64 = 3;
    pub const CONNECTOME: u64 = 4;
    pub const ENSEMBLE: u64 = 5;
    pub const INIT: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_draws_are_reproducible() {
        assert_eq!(normal(&[1, 2, 3]), normal(&[1, 2, 3]));
        assert_ne!(normal(&[1, 2, 3]), normal(&[1, 2, 4]));
        assert_ne!(hash_key(&[1, 2]), hash_key(&[2, 1]));
    }

    #[test]
    fn normal_moments() {
        let n = 200_000u64;
        let (mut s, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let x = normal(&[7, i]);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.015, "var {var}");
    }

    #[test]
    fn uniform_stays_open() {
        assert!(unit_open(0) > 0.0);
        assert!(unit_open(u64::MAX) < 1.0);
    }
}
