//! Seeded weight initialization.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::{Element, Tensor};

/// Deterministic initializer: the same seed and the same registration
/// order give bit-identical parameters.
pub struct Initializer {
    rng: Xoshiro256PlusPlus,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| {
            T::from_f64(self.rng.random_range(-bound..=bound))
        })
    }

    /// He-uniform for a layer with `fan_in` inputs feeding a ReLU.
    pub fn he<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }

    /// Glorot-uniform.
    pub fn xavier<T: Element>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }
}
