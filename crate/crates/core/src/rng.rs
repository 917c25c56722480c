//! Seeded, splittable random streams.
//!
//! Backed by ChaCha8 (a counter-mode stream cipher), so the state is fully
//! described by `(seed, stream, counter)` and draws are identical on every
//! platform. Normals use the Box-Muller transform over two 53-bit uniforms.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream::at(seed, 0, 0)
    }

    /// Reconstructs a stream positioned after `counter` 64-bit draws.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(counter as u128 * 2);
        RngStream {
            seed,
            stream,
            counter,
            rng,
        }
    }

    /// An independent stream sharing the seed.
    pub fn split(&self, stream: u64) -> Self {
        RngStream::at(self.seed, self.stream.wrapping_mul(0x9E37_79B9).wrapping_add(stream + 1), 0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; bias is < n / 2^64, irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.normal()))
    }

    pub fn uniform_tensor<T: Real>(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.uniform_in(lo, hi)))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = RngStream::new(7).normal_tensor::<f64>(vec![64]);
        let b = RngStream::new(7).normal_tensor::<f64>(vec![64]);
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn resume_from_counter() {
        let mut a = RngStream::new(3);
        for _ in 0..5 {
            a.next_u64();
        }
        let mut b = RngStream::at(3, 0, a.counter());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn split_streams_differ() {
        let base = RngStream::new(11);
        let mut s1 = base.split(1);
        let mut s2 = base.split(2);
        assert_ne!(s1.next_u64(), s2.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
