//! Seeded random streams.
//!
//! All randomness flows through [`Rng`], a ChaCha8 generator. Independent
//! streams are derived from a master seed plus a (domain, index) pair, so a
//! draw never depends on how many values another consumer has taken.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::real::Real;
use crate::tensor::Tensor;

/// Stream domains used across the crate.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DEQUANTIZE: u64 = 4;
    pub const TEMPERATURE: u64 = 5;
    pub const LATENT: u64 = 6;
    pub const UNCERTAINTY: u64 = 7;
    pub const PHANTOM: u64 = 8;
    pub const EVAL: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, domain, index)`.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ domain) ^ index)
}

#[derive(Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn stream(master: u64, domain: u64, index: u64) -> Self {
        Self::seed(derive_seed(master, domain, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Inclusive integer range.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    /// Standard normal draw via the Box–Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm_sqrt(-2.0 * libm_ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm_sin(theta));
        r * libm_cos(theta)
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::c(self.normal()))
    }

    pub fn uniform_tensor<T: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::c(self.uniform_range(lo, hi)))
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
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
}

// The f64 transcendental calls go through num-traits so the same code
// builds with and without std.
fn libm_sqrt(v: f64) -> f64 {
    num_traits::Float::sqrt(v)
}
fn libm_ln(v: f64) -> f64 {
    num_traits::Float::ln(v)
}
fn libm_sin(v: f64) -> f64 {
    num_traits::Float::sin(v)
}
fn libm_cos(v: f64) -> f64 {
    num_traits::Float::cos(v)
}
