//! Seeded randomness with named substreams.
//!
//! Every stochastic component draws from its own [`Stream`], derived from a
//! single root seed plus a label. Two runs with the same root seed consume
//! identical random sequences regardless of which other components exist,
//! which is what makes module-level determinism compose (and what lets the
//! single-option agent line up bitwise with a reference soft actor-critic).

use crate::math;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from `root` and a stream label (FNV-1a over the
/// label, then a splitmix64 finalizer to spread low-entropy labels).
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream (ChaCha8 keyed by a derived seed).
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    /// Stream for `label` under the given root seed.
    pub fn named(root: u64, label: &str) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(root, label)),
        }
    }

    /// Stream seeded directly (no label mixing).
    pub fn from_seed(seed: u64) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling over the top multiple of n keeps it unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller (both values used, cached).
    pub fn normal(&mut self) -> f64 {
        // Draw u1 in (0,1] so ln never sees zero.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = math::sqrt(-2.0 * math::ln(u1));
        r * math::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Standard Gumbel: -ln(-ln(U)).
    pub fn gumbel(&mut self) -> f64 {
        let u = 1.0 - self.uniform();
        -math::ln(-math::ln(u))
    }

    /// Samples an index from an explicit probability vector.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}
