use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` (Kaiming-uniform with
/// `a = sqrt(5)`).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Complex-normal spectral weights scaled by `1/(c_in c_out)`.
pub fn spectral_normal(n_modes: usize, c_out: usize, c_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = 1.0 / (c_in * c_out) as f64;
    Tensor::from_fn(&[n_modes, c_out, c_in, 2], |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}
