//! Shared fixtures for the benchmark targets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Deterministic k x p standard-normal-ish sample block.
pub fn sample_block(rng: &mut ChaCha8Rng, k: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, p, |_, _| rng.gen_range(-1.0..1.0) * 1.3)
}

/// Mildly uneven positive weights summing to k.
pub fn uneven_weights(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    let raw = DVector::from_fn(k, |_, _| rng.gen_range(0.2..1.8));
    let mean = raw.mean();
    raw / mean
}
