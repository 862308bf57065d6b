//! Seeded pseudorandom source.
//!
//! Backed by ChaCha8 (`rand_chacha`), whose output stream is fixed by the
//! seed on every platform, and the ziggurat standard-normal sampler from
//! `rand_distr`. Parallel work derives child generators with
//! [`Rng::child`] (`seed XOR task index`) instead of sharing one generator.

use crate::error::{Error, Result};
use crate::raster::Raster;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for task `index`.
    pub fn child(&self, index: u64) -> Rng {
        Rng::new(self.seed ^ index)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw from `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.inner.random_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        if n <= 1 {
            return 0;
        }
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}

/// I.i.d. standard-normal raster.
pub fn randn_raster(shape: (usize, usize, usize), rng: &mut Rng) -> Result<Raster> {
    let (c, h, w) = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidShape(format!("zero dimension in {c}×{h}×{w}")));
    }
    Raster::from_fn(c, h, w, |_, _, _| rng.normal())
}
