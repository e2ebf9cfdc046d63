use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Prior, SamplerConfig};
use super::flow::gaussian;
use super::net::ConditionalField;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::Scalar;

/// Initial noise `[T, dim]` drawn from the sampler seed, where `T` is the
/// number of condition frames. The μ-centered prior needs `dim` to match μ.
pub fn initial_noise<S: Scalar>(mu: &Tensor<S>, dim: usize, prior: Prior, seed: u64) -> Result<Tensor<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = gaussian::<S, _>(&mut rng, &[mu.rows(), dim]);
    match prior {
        Prior::Standard => Ok(x0),
        Prior::MuCentered => x0.zip_map(mu, |a, b| a + b),
    }
}

/// Draws `x0` from the prior with `cfg.seed` and integrates with
/// [`euler_from`].
pub fn euler_sample<S: Scalar, F: ConditionalField<S> + ?Sized>(
    field: &F,
    ps: &ParamStore<S>,
    mu: &Tensor<S>,
    cfg: &SamplerConfig,
    prior: Prior,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    let x0 = initial_noise(mu, field.data_dim(mu), prior, cfg.seed)?;
    euler_from(field, ps, mu, x0, cfg)
}

/// Fixed-step Euler integration from `t = 0` to `1` with classifier-free
/// guidance: `x += ε·((1 + β)·v(x|μ) − β·v(x|∅))`. With `β = 0` the
/// unconditional branch is skipped and the update is plain conditional Euler.
pub fn euler_from<S: Scalar, F: ConditionalField<S> + ?Sized>(
    field: &F,
    ps: &ParamStore<S>,
    mu: &Tensor<S>,
    x0: Tensor<S>,
    cfg: &SamplerConfig,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    if cfg.beta == 0.0 {
        return euler_plain(field, ps, mu, x0, cfg.steps);
    }
    let eps = S::one() / S::lit(cfg.steps as f64);
    let beta = S::lit(cfg.beta);
    let mut x = x0;
    for k in 0..cfg.steps {
        let t = S::lit(k as f64) * eps;
        let vc = field.velocity(ps, &x, Some(mu), t)?;
        let vu = field.velocity(ps, &x, None, t)?;
        let v = vc.zip_map(&vu, |c, u| (S::one() + beta) * c - beta * u)?;
        x = x.zip_map(&v, |a, b| a + eps * b)?;
    }
    x.check_finite("sampled mel")?;
    Ok(x)
}

/// Unguided conditional Euler integration.
pub fn euler_plain<S: Scalar, F: ConditionalField<S> + ?Sized>(
    field: &F,
    ps: &ParamStore<S>,
    mu: &Tensor<S>,
    x0: Tensor<S>,
    steps: usize,
) -> Result<Tensor<S>> {
    if steps < 1 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let eps = S::one() / S::lit(steps as f64);
    let mut x = x0;
    for k in 0..steps {
        let t = S::lit(k as f64) * eps;
        let v = field.velocity(ps, &x, Some(mu), t)?;
        x = x.zip_map(&v, |a, b| a + eps * b)?;
    }
    x.check_finite("sampled mel")?;
    Ok(x)
}
