//! Deterministic random streams.
//!
//! Every stochastic component (dropout, neighbor sampling, shuffling,
//! degree-biased sends) draws from a stream derived from explicit integer
//! keys, so runs are reproducible and independent of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, cheap enough to call per element.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of key components into one 64-bit stream seed.
#[inline]
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64; // arbitrary non-zero start
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// ChaCha stream seeded from key components; used where a full RNG is needed
/// (shuffles, sampling without replacement).
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Maps a u64 to a double in [0, 1).
#[inline]
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based dropout stream: one independent uniform draw per output
/// element, keyed by (seed, epoch, minibatch, layer, element index). The same
/// key always yields the same mask, so fused and unfused execution paths and
/// any worker-count agree bit-for-bit.
#[derive(Clone, Copy, Debug)]
pub struct DropoutKey {
    base: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, epoch: u64, minibatch: u64, layer: u64) -> Self {
        DropoutKey {
            base: mix(&[seed, 0xd80f, epoch, minibatch, layer]),
        }
    }

    /// Uniform draw in [0,1) for element `index` of the op output.
    #[inline]
    pub fn draw(&self, index: u64) -> f64 {
        unit_f64(splitmix64(self.base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_is_stable() {
        // Frozen values so an accidental algorithm change is caught.
        assert_eq!(splitmix64(0), 0xe220a8397b1dcdaf);
        assert_eq!(splitmix64(1), 0x910a2dec89025cc1);
    }

    #[test]
    fn unit_f64_in_range() {
        for i in 0..1000u64 {
            let u = unit_f64(splitmix64(i));
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn dropout_key_is_deterministic_and_sensitive() {
        let a = DropoutKey::new(7, 1, 2, 0);
        let b = DropoutKey::new(7, 1, 2, 0);
        let c = DropoutKey::new(7, 1, 2, 1);
        assert_eq!(a.draw(42), b.draw(42));
        assert_ne!(a.draw(42), c.draw(42));
        assert_ne!(a.draw(42), a.draw(43));
    }
}
