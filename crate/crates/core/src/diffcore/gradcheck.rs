//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::Scalar;

/// Default threshold a healthy layer must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (`None` checks all).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Multiplies every analytic gradient before comparison. Only for
    /// exercising the failure path.
    pub corrupt_factor: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_coords: None, seed: 0, corrupt_factor: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per tensor: name and its largest relative error.
    pub entries: Vec<(String, f64)>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backprop gradients against central differences for every
/// parameter in `params` (all parameters when `None`) and every input.
///
/// `build` must record a forward pass and return its output; non-scalar
/// outputs are reduced with a fixed random projection so that every output
/// element contributes to the checked scalar.
pub fn gradient_check<S, F>(
    ps: &mut ParamStore<S>,
    params: Option<&[ParamId]>,
    inputs: &[Tensor<S>],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &ParamStore<S>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let param_ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => ps.ids().collect(),
    };

    let mut projection: Option<Tensor<S>> = None;
    let mut evaluate = |ps: &ParamStore<S>, inputs: &[Tensor<S>], rng: &mut ChaCha8Rng, want_grads: bool|
     -> Result<(S, Option<(Graph<S>, Vec<Var>)>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, ps, &vars)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let proj = projection.get_or_insert_with(|| {
                let shape = g.shape(out).to_vec();
                let n: usize = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| S::lit(rng.random_range(-1.0..1.0))).collect())
                    .expect("sized")
            });
            let p = g.constant(proj.clone());
            let prod = g.mul(out, p)?;
            g.sum(prod)
        };
        let value = g.value(loss).data()[0];
        if want_grads {
            g.backward(loss)?;
            Ok((value, Some((g, vars))))
        } else {
            Ok((value, None))
        }
    };

    let (_, graph) = evaluate(ps, inputs, &mut rng, true)?;
    let (graph, vars) = graph.expect("gradients requested");

    let factor = opts.corrupt_factor.unwrap_or(1.0);
    let mut full = ps.clone();
    full.zero_grad();
    graph.accumulate_param_grads(&mut full);
    let param_grads: Vec<Tensor<S>> = param_ids.iter().map(|&id| full.get(id).grad.clone()).collect();
    let input_grads: Vec<Tensor<S>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    for g in param_grads.iter().chain(&input_grads) {
        g.check_finite("analytic gradient")?;
    }

    let h = S::lit(opts.step);
    let two_h = S::lit(2.0 * opts.step);
    let mut entries = Vec::new();
    let mut max_rel = 0.0f64;

    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.max_coords {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        }
    };

    for (slot, &id) in param_ids.iter().enumerate() {
        let n = ps.value(id).len();
        let mut worst = 0.0f64;
        for i in pick(n, &mut rng) {
            let orig = ps.value(id).data()[i];
            ps.value_mut(id).data_mut()[i] = orig + h;
            let plus = evaluate(ps, inputs, &mut rng, false)?.0;
            ps.value_mut(id).data_mut()[i] = orig - h;
            let minus = evaluate(ps, inputs, &mut rng, false)?.0;
            ps.value_mut(id).data_mut()[i] = orig;
            let numeric = ((plus - minus) / two_h).as_f64();
            let analytic = param_grads[slot].data()[i].as_f64() * factor;
            worst = worst.max(relative_error(analytic, numeric));
        }
        max_rel = max_rel.max(worst);
        entries.push((ps.get(id).name.clone(), worst));
    }

    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        let n = inputs[k].len();
        let mut worst = 0.0f64;
        for i in pick(n, &mut rng) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = evaluate(ps, &probe, &mut rng, false)?.0;
            probe[k].data_mut()[i] = orig - h;
            let minus = evaluate(ps, &probe, &mut rng, false)?.0;
            probe[k].data_mut()[i] = orig;
            let numeric = ((plus - minus) / two_h).as_f64();
            let analytic = input_grads[k].data()[i].as_f64() * factor;
            worst = worst.max(relative_error(analytic, numeric));
        }
        max_rel = max_rel.max(worst);
        entries.push((format!("input[{k}]"), worst));
    }

    if !max_rel.is_finite() {
        return Err(Error::NonFinite("finite-difference gradient".into()));
    }
    Ok(GradCheckReport { entries, max_rel_error: max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_passes_and_corruption_is_flagged() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", Tensor::vector(vec![0.7, -1.3, 2.0]));
        let build = |g: &mut Graph<f64>, ps: &ParamStore<f64>, _: &[Var]| {
            let p = g.param(ps, w);
            let s = g.square(p);
            Ok(g.sum(s))
        };
        let ok = gradient_check(&mut ps, None, &[], build, &GradCheckOptions::default()).unwrap();
        assert!(ok.max_rel_error < 1e-8);
        let bad = gradient_check(
            &mut ps,
            None,
            &[],
            build,
            &GradCheckOptions { corrupt_factor: Some(2.0), ..Default::default() },
        )
        .unwrap();
        assert!((bad.max_rel_error - 0.5).abs() < 1e-6);
        assert!(!bad.passes(1e-3));
    }
}
