//! Deterministic random inputs for tests and benches.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Uniform values in [-1, 1), reproducible from the seed.
pub fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Uniform values in [lo, hi), reproducible from the seed.
pub fn rand_tensor_in(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(dims, data).unwrap()
}
