//! Run configuration: a TOML file with one section per component. Relative
//! paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hierflow_core::diffcore::AdamWConfig;
use hierflow_core::flowdec::{DecoderConfig, FlowConfig, SamplerConfig};
use hierflow_core::hierenc::{AblationFlags, EncoderConfig};
use hierflow_core::synthdata::CorpusConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, corpus_dir: "corpus".into(), run_dir: "run".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-step multiplicative learning-rate decay.
    pub lr_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            lr_decay: a.lr_decay,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Crop length in video frames (mel frames are twice this); clips shorter
    /// than the crop are used whole.
    pub crop_frames: usize,
    pub log_flush: u64,
    pub checkpoint_every: u64,
    /// Continue from the run directory's checkpoint instead of starting over.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, crop_frames: 96, log_flush: 10, checkpoint_every: 500, resume: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub gl_iters: usize,
    /// Evaluate at most this many held-out clips (all when absent).
    pub max_samples: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { gl_iters: 60, max_samples: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { betas: vec![0.0, 0.5, 0.7, 1.0, 2.0, 4.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub steps: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { steps: 500 }
    }
}

/// 2-D Gaussian-mixture sanity task for the flow decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate reached at the last step (geometric annealing).
    pub lr_final: f64,
    pub channels: [usize; 2],
    pub heads: usize,
    pub time_dim: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            means: vec![[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]],
            std: 0.3,
            steps: 3000,
            batch: 32,
            lr: 2e-3,
            lr_final: 1e-4,
            channels: [32, 64],
            heads: 2,
            time_dim: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub ablation: AblationFlags,
    pub decoder: DecoderConfig,
    pub flow: FlowConfig,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
    pub toy: ToyConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.run.corpus_dir = resolve(base, &cfg.run.corpus_dir);
        cfg.run.run_dir = resolve(base, &cfg.run.run_dir);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.encoder.ablation = cfg.ablation;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.flow.validate()?;
        self.sampler.validate()?;
        if self.train.crop_frames == 0 {
            bail!("train.crop_frames must be positive");
        }
        if self.train.log_flush == 0 {
            bail!("train.log_flush must be positive");
        }
        if !(self.optim.lr > 0.0) {
            bail!("optim.lr must be positive");
        }
        if self.eval.gl_iters == 0 {
            bail!("eval.gl_iters must be at least 1");
        }
        if self.sweep.betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            bail!("sweep.betas must be finite and non-negative");
        }
        if self.toy.means.len() < 2 || !(self.toy.std > 0.0) || self.toy.batch == 0 || !(self.toy.lr > 0.0 && self.toy.lr_final > 0.0) {
            bail!("toy needs >= 2 means, a positive std, batch and learning rates");
        }
        Ok(())
    }

    /// Same configuration with the given ablation applied to the encoder.
    pub fn with_ablation(&self, flags: AblationFlags) -> Self {
        let mut c = self.clone();
        c.ablation = flags;
        c.encoder.ablation = flags;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
