//! Seeded random source.
//!
//! Uniform bits come from ChaCha8 (`rand_chacha`), seeded with
//! `ChaCha8Rng::seed_from_u64`. Everything built on top of those bits is
//! defined here so that a seed fully determines every draw:
//!
//! - `next_f64`: top 53 bits of a `u64` scaled by 2^-53, giving `[0, 1)`.
//! - `standard_normal`: Marsaglia polar method; the second variate of each
//!   accepted pair is cached and returned by the next call.
//! - `below(n)`: rejection sampling on `u64` so the result is unbiased.
//! - `shuffle`: Fisher-Yates from the last index down.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Vec64;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * m);
                return u * m;
            }
        }
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` i.i.d. draws from `N(mean, sigma²)`.
pub fn gaussian_sample(rng: &mut Rng, mean: f64, sigma: f64, n: usize) -> Result<Vec64> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok((0..n).map(|_| mean + sigma * rng.standard_normal()).collect())
}

/// One draw from `U[lo, hi]`.
pub fn uniform_sample(rng: &mut Rng, lo: f64, hi: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::domain(format!("invalid interval [{lo}, {hi}]")));
    }
    let u = rng.next_f64();
    Ok((lo + (hi - lo) * u).clamp(lo, hi))
}
