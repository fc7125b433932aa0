//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorformer::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with entries uniform on [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Scores with coarse ties and labels correlated with them.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let s = (r.random::<f64>() * 1000.0).round() / 1000.0;
            (s, r.random::<f64>() < 0.2 + 0.6 * s)
        })
        .unzip()
}

/// Dense feature rows whose label depends on the first two columns.
pub fn tabular(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let y = x[0] + 0.5 * x[1] + r.random_range(-0.5..0.5) > 0.0;
            (x, y)
        })
        .unzip()
}
