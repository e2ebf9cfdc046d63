use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate after every step.
    pub lr_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-9,
            weight_decay: 0.01,
            lr_decay: 0.999f64.powf(1.0 / 8.0),
        }
    }
}

/// Adam with decoupled weight decay and a per-step exponential learning-rate
/// decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub cfg: AdamWConfig,
    lr: f64,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, ps: &ParamStore<S>) -> Self {
        let first = ps.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        let second = first.clone();
        Self { lr: cfg.lr, cfg, step: 0, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, ps: &mut ParamStore<S>) {
        self.step += 1;
        let b1 = S::lit(self.cfg.beta1);
        let b2 = S::lit(self.cfg.beta2);
        let one = S::one();
        let bc1 = one - S::lit(self.cfg.beta1.powi(self.step as i32));
        let bc2 = one - S::lit(self.cfg.beta2.powi(self.step as i32));
        let lr = S::lit(self.lr);
        let eps = S::lit(self.cfg.eps);
        let decay = one - lr * S::lit(self.cfg.weight_decay);
        for ((p, m), v) in ps.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grads = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gr = grads[i];
                md[i] = b1 * md[i] + (one - b1) * gr;
                vd[i] = b2 * vd[i] + (one - b2) * gr * gr;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                if self.cfg.weight_decay != 0.0 {
                    *w *= decay;
                }
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        self.lr *= self.cfg.lr_decay;
        ps.zero_grad();
    }

    /// Moment tensors and `[step, lr]` for checkpointing, keyed by parameter name.
    pub fn export(&self, ps: &ParamStore<S>) -> Vec<(String, Tensor<f64>)> {
        let mut out = vec![("adamw.state".to_string(), Tensor::vector(vec![self.step as f64, self.lr]))];
        for ((p, m), v) in ps.iter().zip(&self.first).zip(&self.second) {
            out.push((format!("adamw.m.{}", p.name), m.cast()));
            out.push((format!("adamw.v.{}", p.name), v.cast()));
        }
        out
    }

    pub fn import<'a>(
        &mut self,
        ps: &ParamStore<S>,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor<f64>>,
    ) -> Result<()> {
        let state = lookup("adamw.state").ok_or_else(|| Error::Format("missing adamw.state".into()))?;
        if state.len() != 2 {
            return Err(Error::Format("adamw.state must hold [step, lr]".into()));
        }
        self.step = state.data()[0] as u64;
        self.lr = state.data()[1];
        for ((p, m), v) in ps.iter().zip(&mut self.first).zip(&mut self.second) {
            for (prefix, dst) in [("m", &mut *m), ("v", &mut *v)] {
                let key = format!("adamw.{prefix}.{}", p.name);
                let t = lookup(&key).ok_or_else(|| Error::Format(format!("missing {key}")))?;
                if t.shape() != dst.shape() {
                    return Err(Error::Format(format!("{key} has shape {:?}", t.shape())));
                }
                *dst = t.cast();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::vector(vec![v]));
        ps
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut ps = store(0.37);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..5 {
            opt.step(&mut ps);
        }
        assert_eq!(ps.iter().next().unwrap().value.data()[0], 0.37);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g| + ε).
        let mut ps = store(1.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &ps);
        ps.iter_mut().next().unwrap().grad = Tensor::vector(vec![3.0]);
        opt.step(&mut ps);
        let expected = 1.0 - 1e-4 * 3.0 / (3.0 + 1e-9);
        assert!((ps.iter().next().unwrap().value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(ps.iter().next().unwrap().grad.data()[0], 0.0);
    }

    #[test]
    fn learning_rate_decays_by_0999_every_eight_steps() {
        let mut ps = store(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        for _ in 0..8 {
            opt.step(&mut ps);
        }
        assert!((opt.learning_rate() - 1e-4 * 0.999).abs() < 1e-18);
        assert_eq!(opt.step_count(), 8);
    }
}
