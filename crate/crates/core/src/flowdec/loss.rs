use rand::Rng;

use super::config::{FlowConfig, Prior};
use super::flow::{gaussian, sample_timestep};
use super::net::{Condition, ConditionalField};
use crate::diffcore::{mse_loss, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::Scalar;

/// Random draws behind one flow-matching loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfmDraw {
    pub t: f64,
    pub dropped: bool,
}

/// Conditional flow-matching loss on one clip: samples `t`, noise and the
/// condition dropout, then regresses the field onto the OT target (MSE).
///
/// `x1` is the target `[T, d]` (a constant), `mu` the per-frame conditioning
/// `[T, c]`; the mel decoder uses `c = d`.
/// With the μ-centered prior the noise is shifted by the value of `mu`
/// without a gradient path.
pub fn cfm_loss<S: Scalar, F: ConditionalField<S> + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    field: &F,
    x1: Var,
    mu: Var,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<(Var, CfmDraw)> {
    let (xs, ms) = (g.shape(x1), g.shape(mu));
    if xs.len() != 2 || ms.len() != 2 || xs[0] != ms[0] {
        return Err(Error::dim("cfm_loss", format!("target {xs:?} vs condition {ms:?}")));
    }
    let t = sample_timestep(rng, cfg.cosine_schedule);
    let mut x0 = gaussian::<S, _>(rng, g.shape(x1));
    if cfg.prior == Prior::MuCentered {
        x0 = x0.zip_map(g.value(mu), |a, b| a + b)?;
    }
    let dropped = rng.random::<f64>() < cfg.cfg_drop_prob;
    let sigma = S::lit(cfg.sigma_min);
    // x_t and u stay differentiable in x1; the noise x0 is a constant.
    let a = S::one() - (S::one() - sigma) * S::lit(t);
    let a_x0 = g.constant(x0.map(|p| a * p));
    let c_x0 = g.constant(x0.map(|p| (S::one() - sigma) * p));
    let t_x1 = g.scale(x1, S::lit(t));
    let xt = g.add(a_x0, t_x1)?;
    let u = g.sub(x1, c_x0)?;
    let cond = if dropped { Condition::Null } else { Condition::Mu(mu) };
    let v = field.forward(g, ps, xt, cond, S::lit(t))?;
    Ok((mse_loss(g, v, u)?, CfmDraw { t, dropped }))
}

/// Gaussian negative log-likelihood of `x1` under `N(μ, I)` summed over frames:
/// `Σ ‖x − μ‖²/2 + T·(d/2)·ln 2π`.
pub fn encoder_nll_loss<S: Scalar>(g: &mut Graph<S>, x1: Var, mu: Var) -> Result<Var> {
    let shape = g.shape(x1).to_vec();
    if shape.len() != 2 || g.shape(mu) != shape.as_slice() {
        return Err(Error::dim("encoder_nll", format!("target {:?} vs mean {:?}", shape, g.shape(mu))));
    }
    let d = g.sub(x1, mu)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    let half = g.scale(s, S::lit(0.5));
    let c = (shape[0] * shape[1]) as f64 * 0.5 * (2.0 * std::f64::consts::PI).ln();
    let c = g.constant(crate::diffcore::Tensor::scalar(S::lit(c)));
    g.add(half, c)
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_t: f64,
    pub l_p: f64,
    pub l_cfm: f64,
    pub l_enc: f64,
    pub l_total: f64,
}

/// `L_cfm + L_enc + λc·L_c + λt·L_t + λp·L_p`; any non-finite component is
/// reported by name.
pub fn total_loss(cfm: f64, enc: f64, l_c: f64, l_t: f64, l_p: f64, cfg: &FlowConfig) -> Result<LossBreakdown> {
    for (name, v) in [("L_cfm", cfm), ("L_enc", enc), ("L_c", l_c), ("L_t", l_t), ("L_p", l_p)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    let l_total = cfm + enc + cfg.lambda_c * l_c + cfg.lambda_t * l_t + cfg.lambda_p * l_p;
    Ok(LossBreakdown { l_c, l_t, l_p, l_cfm: cfm, l_enc: enc, l_total })
}

/// Graph version of [`total_loss`] for backpropagation.
pub fn total_loss_var<S: Scalar>(
    g: &mut Graph<S>,
    cfm: Var,
    enc: Var,
    l_c: Var,
    l_t: Var,
    l_p: Var,
    cfg: &FlowConfig,
) -> Result<Var> {
    let wc = g.scale(l_c, S::lit(cfg.lambda_c));
    let wt = g.scale(l_t, S::lit(cfg.lambda_t));
    let wp = g.scale(l_p, S::lit(cfg.lambda_p));
    g.add_all(&[cfm, enc, wc, wt, wp])
}
