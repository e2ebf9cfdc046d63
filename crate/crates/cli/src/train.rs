//! Joint training of encoder and decoder on random clip crops.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use hierflow_core::diffcore::{AdamW, Graph};
use hierflow_core::flowdec::{cfm_loss, encoder_nll_loss, total_loss, total_loss_var, LossBreakdown};
use hierflow_core::hierenc::Mode;
use hierflow_core::synthdata::Corpus;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::model::{crop, encoder_dims, Model, CHECKPOINT_FILE, RUN_CONFIG_FILE};

pub const LOSS_FILE: &str = "loss.csv";
pub const LAYER_WEIGHTS_FILE: &str = "layer_weights.csv";
pub const LOSS_HEADER: [&str; 7] = ["step", "L_c", "L_t", "L_p", "L_cfm", "L_enc", "L_total"];

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub losses: Vec<(u64, LossBreakdown)>,
}

/// Per-step randomness, independent of how the run was split by resumes.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One optimizer step on a random crop of a random training clip.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW<f64>,
    corpus: &Corpus<f64>,
    cfg: &RunConfig,
    step: u64,
) -> anyhow::Result<LossBreakdown> {
    let mut rng = step_rng(cfg.run.seed, step);
    let train = corpus.train_samples();
    let sample = &train[rng.random_range(0..train.len())];
    let len = cfg.train.crop_frames.min(sample.video_frames());
    let start = rng.random_range(0..=sample.video_frames() - len);
    let c = crop(sample, start, len)?;

    let mut g = Graph::new();
    let tr = model.enc.encode(&mut g, &model.ps, &c.input, Some(&c.targets), Mode::Train)?;
    let x1 = g.constant(c.mel);
    let (l_cfm, _) = cfm_loss(&mut g, &model.ps, &model.dec, x1, tr.mu, &cfg.flow, &mut rng)?;
    let l_enc = encoder_nll_loss(&mut g, x1, tr.mu)?;
    let total = total_loss_var(&mut g, l_cfm, l_enc, tr.l_c, tr.l_t, tr.l_p, &cfg.flow)?;
    let v = |x| g.value(x).data()[0];
    let losses = total_loss(v(l_cfm), v(l_enc), v(tr.l_c), v(tr.l_t), v(tr.l_p), &cfg.flow)
        .with_context(|| format!("training step {step}"))?;
    g.backward(total)?;
    g.accumulate_param_grads(&mut model.ps);
    opt.step(&mut model.ps);
    Ok(losses)
}

fn loss_row(step: u64, l: &LossBreakdown) -> [String; 7] {
    [step.to_string(), l.l_c.to_string(), l.l_t.to_string(), l.l_p.to_string(), l.l_cfm.to_string(),
        l.l_enc.to_string(), l.l_total.to_string()]
}

/// Trains until `cfg.train.steps` total steps, writing the loss log,
/// checkpoints and the layer-weight table into `run_dir`.
pub fn train(cfg: &RunConfig, corpus: &Corpus<f64>, run_dir: &Path) -> anyhow::Result<TrainSummary> {
    fs::create_dir_all(run_dir).with_context(|| format!("creating run directory {}", run_dir.display()))?;
    let dims = encoder_dims(corpus)?;
    let ck_path = run_dir.join(CHECKPOINT_FILE);
    let loss_path = run_dir.join(LOSS_FILE);

    let (mut model, mut opt, done, mut prior_rows) = if cfg.train.resume && ck_path.exists() {
        let ck = hierflow_core::diffcore::Checkpoint::load(&ck_path)?;
        let (model, step) = Model::from_checkpoint(cfg, dims, &ck)?;
        let mut opt = AdamW::new(cfg.optim.adamw(), &model.ps);
        opt.import(&model.ps, |n| ck.get(n))?;
        let rows = read_loss_rows(&loss_path, step)?;
        (model, opt, step, rows)
    } else {
        let model = Model::new(cfg, dims, cfg.run.seed)?;
        let opt = AdamW::new(cfg.optim.adamw(), &model.ps);
        (model, opt, 0, Vec::new())
    };
    fs::write(run_dir.join(RUN_CONFIG_FILE), cfg.to_toml())
        .with_context(|| format!("writing {}", run_dir.join(RUN_CONFIG_FILE).display()))?;

    let file = File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    let mut log = csv::Writer::from_writer(BufWriter::new(file));
    log.write_record(LOSS_HEADER)?;
    for r in prior_rows.drain(..) {
        log.write_record(&r)?;
    }
    log.flush()?;

    let mut losses = Vec::new();
    for step in done + 1..=cfg.train.steps {
        let l = train_step(&mut model, &mut opt, corpus, cfg, step)?;
        log.write_record(loss_row(step, &l))?;
        if step % cfg.train.log_flush == 0 {
            log.flush()?;
        }
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            model.checkpoint(Some(&opt), step).save(&ck_path)?;
        }
        losses.push((step, l));
    }
    log.flush()?;
    let last = done.max(cfg.train.steps);
    model.checkpoint(Some(&opt), last).save(&ck_path)?;

    let lw_path = run_dir.join(LAYER_WEIGHTS_FILE);
    if cfg.ablation.weighted_sum {
        let mut w = csv::Writer::from_path(&lw_path)?;
        w.write_record(["layer_index", "softmax_weight"])?;
        for (i, v) in model.enc.layer_weights(&model.ps).iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
    } else if lw_path.exists() {
        fs::remove_file(&lw_path)?;
    }
    Ok(TrainSummary { first_step: done + 1, last_step: last, losses })
}

fn read_loss_rows(path: &Path, upto: u64) -> anyhow::Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let rec = rec?;
        let step: u64 = rec.get(0).unwrap_or("").parse().context("malformed loss log")?;
        if step <= upto {
            rows.push(rec.iter().map(str::to_string).collect());
        }
    }
    Ok(rows)
}

/// `(step, L_total)` pairs from a loss log.
pub fn read_total_loss(path: &Path) -> anyhow::Result<Vec<(u64, f64)>> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let rec = rec?;
        let step = rec.get(0).unwrap_or("").parse().context("malformed loss log")?;
        let total = rec.get(6).unwrap_or("").parse().context("malformed loss log")?;
        out.push((step, total));
    }
    Ok(out)
}
