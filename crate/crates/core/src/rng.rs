//! Pinned pseudo-random source.
//!
//! All seeded operations draw from SplitMix64 (Steele, Lea & Flood): a
//! 64-bit counter advanced by `0x9e3779b97f4a7c15` and passed through a
//! fixed mixing function. Derived draws are defined here so any other
//! implementation can reproduce them:
//!
//! * `uniform()` = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! * `below(n)`  = `floor(uniform() * n)`, in `0..n`
//! * `range(lo, hi)` = `lo + uniform() * (hi - lo)`

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent stream for item `index` of a seeded collection.
    pub fn for_item(seed: u64, index: u64) -> Self {
        Self::new(seed ^ index)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
