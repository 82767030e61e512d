//! Deterministic counter-based random streams.
//!
//! Every stream is ChaCha8 keyed by a 64-bit seed (expanded with
//! `rand_core`'s `seed_from_u64`) and selected by a 64-bit stream id, so a
//! `(seed, stream)` pair pins the whole sequence independent of platform.
//! Derived samples use fixed transforms:
//!
//! * uniform: top 53 bits of `next_u64` scaled by `2^-53`, in `[0, 1)`;
//! * normal: Box–Muller on two uniforms, `sqrt(-2 ln(1-u1)) cos(2 pi u2)`;
//! * rademacher: sign taken from the lowest bit of `next_u64`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::DenseArray;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream.wrapping_add(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // rejection sampling removes modulo bias
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX % n64);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n64) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn normal_array(&mut self, shape: &[usize]) -> DenseArray {
        DenseArray::from_fn(shape, |_| self.normal())
    }

    pub fn uniform_array(&mut self, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
        DenseArray::from_fn(shape, |_| self.uniform_range(lo, hi))
    }

    pub fn rademacher_array(&mut self, shape: &[usize]) -> DenseArray {
        DenseArray::from_fn(shape, |_| self.rademacher())
    }
}
