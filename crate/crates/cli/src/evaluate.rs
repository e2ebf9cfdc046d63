//! Sampling from a trained model and attribute metrics after a Griffin-Lim
//! round trip.

use std::path::Path;

use anyhow::Context;
use hierflow_core::flowdec::{euler_sample, SamplerConfig};
use hierflow_core::hierenc::{encode, Mode};
use hierflow_core::signal::{
    cosine_sim, estimate_pitch, griffin_lim, log_mel, mae_energy, rmse_f0, MelSpectrogram,
};
use hierflow_core::synthdata::{Corpus, SyntheticSample, TimbreProbe};

use crate::config::RunConfig;
use crate::model::{encoder_input, Model};
use crate::train::{read_total_loss, LOSS_FILE};

pub const METRICS_HEADER: [&str; 7] = ["run", "sample_id", "status", "rmse_f0", "mae_e", "timbre_cos", "l_total_tail"];
pub const AGGREGATE_ID: &str = "ALL";
/// Number of final logged steps averaged into `l_total_tail`.
pub const TAIL_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    /// Absent when the two tracks share no voiced frame.
    pub rmse_f0: Option<f64>,
    pub mae_e: f64,
    pub timbre_cos: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub sample_id: String,
    /// `ok`, or `absent` for a run directory that does not exist.
    pub status: String,
    pub rmse_f0: Option<f64>,
    pub mae_e: Option<f64>,
    pub timbre_cos: Option<f64>,
    pub l_total_tail: Option<f64>,
}

impl MetricsRow {
    pub fn absent(run: &str) -> Self {
        Self {
            run: run.into(),
            sample_id: AGGREGATE_ID.into(),
            status: "absent".into(),
            rmse_f0: None,
            mae_e: None,
            timbre_cos: None,
            l_total_tail: None,
        }
    }

    /// Every present value is finite (absent values allowed).
    pub fn is_well_formed(&self) -> bool {
        [self.rmse_f0, self.mae_e, self.timbre_cos, self.l_total_tail].iter().flatten().all(|v| v.is_finite())
    }

    /// All three metrics present and finite.
    pub fn is_finite(&self) -> bool {
        self.status == "ok"
            && [self.rmse_f0, self.mae_e, self.timbre_cos].iter().all(|v| v.is_some_and(f64::is_finite))
    }

    fn record(&self) -> [String; 7] {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        [self.run.clone(), self.sample_id.clone(), self.status.clone(), f(self.rmse_f0), f(self.mae_e),
            f(self.timbre_cos), f(self.l_total_tail)]
    }
}

/// Compares a generated mel with the reference after sending both through the
/// same vocoder and re-analysis, so neither side keeps an advantage from
/// skipping the phase reconstruction.
pub fn clip_metrics(
    generated: &MelSpectrogram<f64>,
    reference: &MelSpectrogram<f64>,
    probe: &TimbreProbe<f64>,
    gl_iters: usize,
) -> anyhow::Result<ClipMetrics> {
    let wg = griffin_lim(generated, gl_iters)?;
    let wr = griffin_lim(reference, gl_iters)?;
    let (mg, mr) = (log_mel(&wg)?, log_mel(&wr)?);
    let f0 = rmse_f0(&estimate_pitch(&wg), &estimate_pitch(&wr))?;
    let mae_e = mae_energy(&mg, &mr)?;
    let timbre_cos = cosine_sim(&probe.embed(&mg)?, &probe.embed(&mr)?)?;
    Ok(ClipMetrics { rmse_f0: f0, mae_e, timbre_cos })
}

/// Sampler settings for the clip at `index`: the configured seed offset by
/// the clip index so clips draw distinct noise.
pub fn clip_sampler(cfg: &SamplerConfig, index: usize) -> SamplerConfig {
    SamplerConfig { seed: cfg.seed.wrapping_add(index as u64), ..cfg.clone() }
}

/// Encodes the clip's visual features (inference mode) and integrates the flow.
pub fn generate(
    model: &Model,
    sample: &SyntheticSample<f64>,
    sampler: &SamplerConfig,
    cfg: &RunConfig,
) -> anyhow::Result<MelSpectrogram<f64>> {
    let (mu, _) = encode(&model.enc, &model.ps, &encoder_input(sample), None, Mode::Infer)?;
    let mel = euler_sample(&model.dec, &model.ps, &mu, sampler, cfg.flow.prior)?;
    Ok(MelSpectrogram::new(mel)?)
}

/// Held-out clips evaluated under `cfg`.
pub fn eval_clips<'a>(corpus: &'a Corpus<f64>, cfg: &RunConfig) -> &'a [SyntheticSample<f64>] {
    let clips = corpus.eval_samples();
    &clips[..cfg.eval.max_samples.unwrap_or(clips.len()).min(clips.len())]
}

/// Per-clip rows followed by the aggregate row for one model.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus<f64>,
    cfg: &RunConfig,
    sampler: &SamplerConfig,
    label: &str,
    threads: usize,
) -> anyhow::Result<Vec<MetricsRow>> {
    let clips = eval_clips(corpus, cfg);
    let results = crate::parallel::map(clips, threads, |i, s| -> anyhow::Result<ClipMetrics> {
        let mel = generate(model, s, &clip_sampler(sampler, i), cfg)?;
        clip_metrics(&mel, &s.mel, &corpus.probe, cfg.eval.gl_iters)
    });
    let mut rows = Vec::with_capacity(clips.len() + 1);
    let mut all = Vec::with_capacity(clips.len());
    for (s, r) in clips.iter().zip(results) {
        let m = r.with_context(|| format!("evaluating {}", s.id))?;
        rows.push(MetricsRow {
            run: label.into(),
            sample_id: s.id.clone(),
            status: "ok".into(),
            rmse_f0: m.rmse_f0,
            mae_e: Some(m.mae_e),
            timbre_cos: Some(m.timbre_cos),
            l_total_tail: None,
        });
        all.push(m);
    }
    rows.push(aggregate(label, &all));
    Ok(rows)
}

/// Means over clips; pitch error averages the clips where it is defined.
pub fn aggregate(label: &str, clips: &[ClipMetrics]) -> MetricsRow {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    MetricsRow {
        run: label.into(),
        sample_id: AGGREGATE_ID.into(),
        status: "ok".into(),
        rmse_f0: mean(clips.iter().filter_map(|c| c.rmse_f0).collect()),
        mae_e: mean(clips.iter().map(|c| c.mae_e).collect()),
        timbre_cos: mean(clips.iter().map(|c| c.timbre_cos).collect()),
        l_total_tail: None,
    }
}

/// Mean `L_total` over the last logged steps of a run, if it has a log.
pub fn loss_tail(run_dir: &Path) -> anyhow::Result<Option<f64>> {
    let path = run_dir.join(LOSS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let log = read_total_loss(&path)?;
    let tail = &log[log.len().saturating_sub(TAIL_STEPS)..];
    Ok((!tail.is_empty()).then(|| tail.iter().map(|(_, l)| l).sum::<f64>() / tail.len() as f64))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Whether pitch error `a` is strictly better than `b`. An absent value
/// (no jointly voiced frame at all) ranks below every defined one.
pub fn rmse_strictly_better(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x < y,
        (Some(_), None) => true,
        (None, _) => false,
    }
}
