//! Seeded random streams. Every stochastic component takes its own stream so
//! results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from a base seed.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian tensor with standard deviation `std`.
pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// He-normal initialization for a layer with the given fan-in.
pub fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    normal_tensor(rng, shape, gain * (2.0 / fan_in as f64).sqrt())
}
