//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

/// Uniform Glorot initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.random_range(-limit..limit)))
}

/// Glorot init for a `[in, out]` projection.
pub fn linear<F: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    glorot(rng, &[fan_in, fan_out], fan_in, fan_out)
}

/// Glorot init for `[K, D_in, D_out]` convolution weights.
pub fn conv<F: Scalar>(rng: &mut ChaCha8Rng, kernel: usize, din: usize, dout: usize) -> Tensor<F> {
    glorot(rng, &[kernel, din, dout], kernel * din, kernel * dout)
}
