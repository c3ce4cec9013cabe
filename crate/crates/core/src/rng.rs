//! Seeded, platform-independent random stream.
//!
//! `RngStream` is xoshiro256++ whose 256-bit state is expanded from a `u64`
//! seed with SplitMix64. Both are pure integer arithmetic, so a seed yields the
//! same sequence on every platform.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct RngStream {
    inner: Xoshiro256PlusPlus,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream, e.g. one per test case.
    pub fn fork(&mut self) -> RngStream {
        RngStream::new(self.inner.next_u64())
    }

    /// Raw 64-bit draw, e.g. to seed a sub-run that is reported by seed.
    pub fn next_seed(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform index in `0..n` by rejection sampling on `u64`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() on empty range");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for RngStream {
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
