use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// OT conditional path `φ_t = (1 − (1 − σ)t)·x0 + t·x1`.
pub fn ot_flow<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>, t: S, sigma_min: S) -> Result<Tensor<S>> {
    if !(t >= S::zero() && t <= S::one()) {
        return Err(Error::Validation(format!("flow time {t} outside [0, 1]")));
    }
    let a = S::one() - (S::one() - sigma_min) * t;
    x0.zip_map(x1, |p, q| a * p + t * q)
}

/// Time-constant target field `u = x1 − (1 − σ)·x0`.
pub fn ot_target_field<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>, sigma_min: S) -> Result<Tensor<S>> {
    let c = S::one() - sigma_min;
    x0.zip_map(x1, |p, q| q - c * p)
}

/// Maps `u ∈ [0, 1]` to flow time: `1 − cos(uπ/2)` with the cosine schedule,
/// identity otherwise.
pub fn timestep_from_uniform(u: f64, cosine: bool) -> f64 {
    if cosine {
        1.0 - (u * std::f64::consts::FRAC_PI_2).cos()
    } else {
        u
    }
}

pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, cosine: bool) -> f64 {
    timestep_from_uniform(rng.random::<f64>(), cosine)
}

/// Standard-normal tensor.
pub fn gaussian<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.sample::<f64, _>(rand_distr::StandardNormal))).collect();
    Tensor::new(shape, data).expect("sized")
}
