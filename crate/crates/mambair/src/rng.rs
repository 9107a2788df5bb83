//! Seeded random number generation.
//!
//! Everything stochastic in the crate (weight init, patch sampling, noise)
//! draws from a ChaCha8 stream through this wrapper, so a fixed seed gives
//! bit-identical runs on every platform. Gaussian samples use Box-Muller on
//! explicitly constructed uniforms rather than a library distribution, to
//! keep the byte-level trajectory independent of crate-version changes.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Rng {
    inner: ChaCha8Rng,
    spare_gauss: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_gauss: None,
        }
    }

    /// Independent child stream for a named purpose ("init", "noise", ...).
    pub fn derive(seed: u64, label: &str) -> Self {
        // FNV-1a over the label, folded into the seed.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        Rng::new(seed ^ h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is ~n/2^64, irrelevant at these ranges.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; both branch values are consumed.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gauss.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gauss = Some(r * theta.sin());
        r * theta.cos()
    }
}
