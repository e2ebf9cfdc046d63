//! The trainable system: hierarchical encoder plus flow-matching decoder on a
//! single parameter store, and its checkpoint format.

use std::path::Path;

use anyhow::{bail, Context};
use hierflow_core::diffcore::{AdamW, Checkpoint, ParamStore, Tensor};
use hierflow_core::flowdec::VectorFieldNet;
use hierflow_core::hierenc::{EncoderDims, EncoderInput, EncoderTargets, HierEncoder};
use hierflow_core::signal::N_MELS;
use hierflow_core::synthdata::{Corpus, SyntheticSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_CONFIG_FILE: &str = "config.toml";

const STEP_KEY: &str = "train.step";
const ENERGY_KEY: &str = "model.energy_stats";

pub struct Model {
    pub ps: ParamStore<f64>,
    pub enc: HierEncoder,
    pub dec: VectorFieldNet,
    pub dims: EncoderDims,
}

/// Encoder widths from the corpus, with energy statistics over the training
/// split.
pub fn encoder_dims(corpus: &Corpus<f64>) -> anyhow::Result<EncoderDims> {
    let c = &corpus.config;
    let mut energies = Vec::new();
    for s in corpus.train_samples() {
        energies.extend_from_slice(&s.targets()?.energy);
    }
    if energies.is_empty() {
        bail!("corpus has no training frames");
    }
    let n = energies.len() as f64;
    let mean = energies.iter().sum::<f64>() / n;
    let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(EncoderDims {
        lip_layers: c.n_layers,
        d_lip: c.d_lip,
        d_face: c.d_face,
        d_expr: c.d_expr,
        d_timbre: c.d_timbre,
        n_units: corpus.kmeans.k(),
        n_mels: N_MELS,
        energy_mean: mean,
        energy_std: var.sqrt().max(1e-6),
    })
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: &RunConfig, dims: EncoderDims, seed: u64) -> anyhow::Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let enc = HierEncoder::new(&mut ps, &cfg.encoder, dims, &mut rng)?;
        let dec = VectorFieldNet::new(&mut ps, &cfg.decoder, N_MELS, N_MELS, &mut rng)?;
        Ok(Self { ps, enc, dec, dims })
    }

    pub fn checkpoint(&self, opt: Option<&AdamW<f64>>, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.ps);
        ck.insert(STEP_KEY, Tensor::scalar(step as f64));
        ck.insert(ENERGY_KEY, Tensor::vector(vec![self.dims.energy_mean, self.dims.energy_std]));
        ck.insert("model.layer_weights", Tensor::vector(self.enc.layer_weights(&self.ps)));
        if let Some(o) = opt {
            for (name, t) in o.export(&self.ps) {
                ck.insert(name, t);
            }
        }
        ck
    }

    /// Rebuilds the model from a checkpoint; returns it with the stored step.
    pub fn from_checkpoint(cfg: &RunConfig, dims: EncoderDims, ck: &Checkpoint) -> anyhow::Result<(Self, u64)> {
        let stats = ck.require(ENERGY_KEY)?;
        if stats.len() != 2 {
            bail!("malformed energy statistics in checkpoint");
        }
        let dims = EncoderDims { energy_mean: stats.data()[0], energy_std: stats.data()[1], ..dims };
        let mut m = Self::new(cfg, dims, 0)?;
        ck.load_params(&mut m.ps)?;
        let step = ck.require(STEP_KEY)?.data()[0] as u64;
        Ok((m, step))
    }

    pub fn load(cfg: &RunConfig, dims: EncoderDims, run_dir: &Path) -> anyhow::Result<(Self, u64)> {
        let path = run_dir.join(CHECKPOINT_FILE);
        let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Self::from_checkpoint(cfg, dims, &ck)
    }
}

/// Visual encoder input of a whole clip.
pub fn encoder_input(s: &SyntheticSample<f64>) -> EncoderInput<f64> {
    EncoderInput { lip_layers: s.lip_layers.clone(), face_id: s.face_id.clone(), expr: s.expr_feats.clone() }
}

/// A contiguous window of `len` video frames starting at `start`, with the
/// matching mel frames and targets.
pub struct Crop {
    pub input: EncoderInput<f64>,
    pub targets: EncoderTargets<f64>,
    pub mel: Tensor<f64>,
}

pub fn crop(s: &SyntheticSample<f64>, start: usize, len: usize) -> anyhow::Result<Crop> {
    let tg = s.targets()?;
    if start + len > s.video_frames() || len == 0 {
        bail!("crop [{start}, {}) outside clip of {} frames", start + len, s.video_frames());
    }
    let (m0, ml) = (2 * start, 2 * len);
    let input = EncoderInput {
        lip_layers: s.lip_layers.iter().map(|l| l.slice_rows(start, len)).collect::<Result<_, _>>()?,
        face_id: s.face_id.clone(),
        expr: s.expr_feats.slice_rows(start, len)?,
    };
    let targets = EncoderTargets {
        content_units: tg.content_units[m0..m0 + ml].to_vec(),
        timbre: tg.timbre_vec.clone(),
        pitch: tg.pitch[m0..m0 + ml].to_vec(),
        energy: tg.energy[m0..m0 + ml].to_vec(),
    };
    Ok(Crop { input, targets, mel: s.mel.frames.slice_rows(m0, ml)? })
}
