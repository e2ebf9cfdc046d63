//! Two-dimensional Gaussian-mixture task for the flow decoder: noise is
//! transported to the mixture component named by a one-hot condition.

use anyhow::bail;
use hierflow_core::diffcore::{one_hot, AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use hierflow_core::flowdec::{
    cfm_loss, euler_from, euler_sample, gaussian, DecoderConfig, FlowConfig, Prior, SamplerConfig, VectorFieldNet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ToyConfig;

pub struct ToyModel {
    pub ps: ParamStore<f64>,
    pub net: VectorFieldNet,
    pub cfg: ToyConfig,
    /// Mean training loss over the final 100 steps.
    pub final_loss: f64,
}

/// One mixture draw: `(label, point)`.
pub fn draw<R: Rng + ?Sized>(cfg: &ToyConfig, rng: &mut R) -> (usize, [f64; 2]) {
    let k = rng.random_range(0..cfg.means.len());
    let m = cfg.means[k];
    let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
    (k, [m[0] + cfg.std * e[0], m[1] + cfg.std * e[1]])
}

fn condition(cfg: &ToyConfig, label: usize) -> Tensor<f64> {
    one_hot(&[label], cfg.means.len()).expect("label in range")
}

/// Trains with mini-batches accumulated over single-point graphs.
pub fn train_toy(cfg: &ToyConfig, seed: u64) -> anyhow::Result<ToyModel> {
    let dec = DecoderConfig { channels: cfg.channels, heads: cfg.heads, time_dim: cfg.time_dim, kernel: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let net = VectorFieldNet::new(&mut ps, &dec, 2, cfg.means.len(), &mut rng)?;
    let flow = FlowConfig::default();
    let lr_decay = (cfg.lr_final / cfg.lr).powf(1.0 / cfg.steps.max(1) as f64);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, lr_decay, ..AdamWConfig::default() }, &ps);
    let inv_batch = 1.0 / cfg.batch as f64;
    let mut recent = Vec::new();
    for _ in 0..cfg.steps {
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch {
            let (k, x) = draw(cfg, &mut rng);
            let mut g = Graph::new();
            let x1 = g.constant(Tensor::matrix(1, 2, x.to_vec())?);
            let mu = g.constant(condition(cfg, k));
            let (l, _) = cfm_loss(&mut g, &ps, &net, x1, mu, &flow, &mut rng)?;
            let l = g.scale(l, inv_batch);
            step_loss += g.value(l).data()[0];
            g.backward(l)?;
            g.accumulate_param_grads(&mut ps);
        }
        if !step_loss.is_finite() {
            bail!("toy training diverged");
        }
        opt.step(&mut ps);
        recent.push(step_loss);
    }
    let tail = &recent[recent.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    Ok(ToyModel { ps, net, cfg: cfg.clone(), final_loss })
}

impl ToyModel {
    /// Samples `n` points of class `label` with an unguided Euler solver.
    pub fn sample_class(&self, label: usize, n: usize, steps: usize, seed: u64) -> anyhow::Result<Vec<[f64; 2]>> {
        let mu = condition(&self.cfg, label);
        (0..n)
            .map(|i| {
                let sc = SamplerConfig { steps, beta: 0.0, seed: seed.wrapping_add(i as u64) };
                let x = euler_sample(&self.net, &self.ps, &mu, &sc, Prior::Standard)?;
                Ok([x.data()[0], x.data()[1]])
            })
            .collect()
    }

    /// Endpoint of the trajectory from a given start point.
    pub fn integrate(&self, label: usize, x0: [f64; 2], steps: usize) -> anyhow::Result<[f64; 2]> {
        let mu = condition(&self.cfg, label);
        let sc = SamplerConfig { steps, beta: 0.0, seed: 0 };
        let x = euler_from(&self.net, &self.ps, &mu, Tensor::matrix(1, 2, x0.to_vec())?, &sc)?;
        Ok([x.data()[0], x.data()[1]])
    }
}

/// Largest distance between a class's sample mean and its configured mean,
/// over all classes (`per_class` samples each, `n_steps` Euler steps).
pub fn worst_mean_error(model: &ToyModel, per_class: usize, n_steps: usize, seed: u64) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for (k, m) in model.cfg.means.iter().enumerate() {
        let pts = model.sample_class(k, per_class, n_steps, seed.wrapping_add(1_000_000 * k as u64))?;
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
        worst = worst.max(((sx / n - m[0]).powi(2) + (sy / n - m[1]).powi(2)).sqrt());
    }
    Ok(worst)
}

/// Mean endpoint gap between coarse and fine Euler runs from shared starts,
/// relative to the mean fine endpoint norm.
pub fn few_step_gap(model: &ToyModel, pairs: usize, coarse: usize, fine: usize, seed: u64) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gap, mut norm) = (0.0, 0.0);
    for i in 0..pairs {
        let k = i % model.cfg.means.len();
        let z = gaussian::<f64, _>(&mut rng, &[2]);
        let x0 = [z.data()[0], z.data()[1]];
        let a = model.integrate(k, x0, coarse)?;
        let b = model.integrate(k, x0, fine)?;
        gap += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        norm += (b[0] * b[0] + b[1] * b[1]).sqrt();
    }
    Ok(gap / norm)
}
