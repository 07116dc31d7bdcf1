//! Weight initialization.

use crate::tape::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Initialization scheme for a layer's weights.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Kaiming-style: std = sqrt(2 / fan_in).
    He,
    Zero,
}

/// Box-Muller sample; avoids depending on rand_distr for one function.
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn init_array<F: Scalar>(shape: &[usize], init: Init, fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    match init {
        Init::Zero => ArrayD::zeros(IxDyn(shape)),
        Init::Normal(std) => {
            ArrayD::from_shape_simple_fn(IxDyn(shape), || F::from_f64(randn(rng) * std))
        }
        Init::He => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || F::from_f64(randn(rng) * std))
        }
    }
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}
