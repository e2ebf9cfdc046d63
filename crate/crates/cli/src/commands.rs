//! One function per subcommand. Each returns its result rows so callers other
//! than the binary can inspect them; the binary maps outcomes to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hierflow_core::flowdec::SamplerConfig;
use hierflow_core::hierenc::AblationFlags;
use hierflow_core::signal::{griffin_lim, write_mel_csv, write_wav};
use hierflow_core::synthdata::{load_corpus, save_corpus, Corpus};

use crate::config::RunConfig;
use crate::evaluate::{clip_sampler, evaluate_model, generate, loss_tail, write_metrics, MetricsRow, AGGREGATE_ID};
use crate::gradsuite::{run_suite, SuiteRow};
use crate::model::{encoder_dims, Model, RUN_CONFIG_FILE};
use crate::parallel::{map, worker_count};
use crate::train::{train, TrainSummary};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

pub fn open_corpus(cfg: &RunConfig) -> anyhow::Result<Corpus<f64>> {
    let dir = &cfg.run.corpus_dir;
    if !dir.is_dir() {
        bail!("corpus directory {} does not exist (run gen-data first)", dir.display());
    }
    load_corpus(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> anyhow::Result<Corpus<f64>> {
    let corpus = Corpus::build(cfg.run.seed, &cfg.corpus)?;
    save_corpus(&cfg.run.corpus_dir, &corpus)
        .with_context(|| format!("writing corpus to {}", cfg.run.corpus_dir.display()))?;
    Ok(corpus)
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    let corpus = open_corpus(cfg)?;
    train(cfg, &corpus, &cfg.run.run_dir)
}

/// Configuration a run directory was trained with (falls back to `cfg`),
/// keeping the caller's paths, sampler and evaluation settings.
pub fn run_config(cfg: &RunConfig, run_dir: &Path) -> anyhow::Result<RunConfig> {
    let path = run_dir.join(RUN_CONFIG_FILE);
    if !path.exists() {
        return Ok(cfg.clone());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut rc = RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    rc.run = cfg.run.clone();
    rc.sampler = cfg.sampler.clone();
    rc.eval = cfg.eval.clone();
    Ok(rc)
}

pub fn load_model(cfg: &RunConfig, corpus: &Corpus<f64>, run_dir: &Path) -> anyhow::Result<(Model, RunConfig)> {
    let rc = run_config(cfg, run_dir)?;
    let (model, _) = Model::load(&rc, encoder_dims(corpus)?, run_dir)?;
    Ok((model, rc))
}

/// Writes `mel.csv` and a Griffin-Lim `audio.wav` per clip under
/// `out/samples/<id>/`. Empty `ids` samples every held-out clip.
pub fn cmd_sample(cfg: &RunConfig, ids: &[String], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let corpus = open_corpus(cfg)?;
    let (model, rc) = load_model(cfg, &corpus, &cfg.run.run_dir)?;
    let picked: Vec<(usize, &_)> = if ids.is_empty() {
        corpus.eval_samples().iter().enumerate().collect()
    } else {
        ids.iter()
            .map(|id| {
                corpus.samples.iter().enumerate().find(|(_, s)| &s.id == id).with_context(|| format!("no sample {id}"))
            })
            .collect::<anyhow::Result<_>>()?
    };
    let mut written = Vec::new();
    for (i, s) in picked {
        let mel = generate(&model, s, &clip_sampler(&rc.sampler, i), &rc)?;
        let dir = out.join("samples").join(&s.id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_mel_csv(&dir.join("mel.csv"), &mel)?;
        write_wav(&dir.join("audio.wav"), &griffin_lim(&mel, rc.eval.gl_iters)?)?;
        written.push(dir);
    }
    Ok(written)
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Metrics for one run directory under the given sampler settings.
pub fn eval_run(
    cfg: &RunConfig,
    corpus: &Corpus<f64>,
    run_dir: &Path,
    sampler: &SamplerConfig,
    label: &str,
    threads: usize,
) -> anyhow::Result<Vec<MetricsRow>> {
    let (model, rc) = load_model(cfg, corpus, run_dir)?;
    let mut rows = evaluate_model(&model, corpus, &rc, sampler, label, threads)?;
    if let Some(agg) = rows.last_mut() {
        agg.l_total_tail = loss_tail(run_dir)?;
    }
    Ok(rows)
}

/// Evaluates each run directory; missing ones are reported as absent rows
/// with a warning. Writes `metrics.csv` into `out`.
pub fn cmd_eval(cfg: &RunConfig, runs: &[PathBuf], out: &Path) -> anyhow::Result<Vec<MetricsRow>> {
    let corpus = open_corpus(cfg)?;
    let mut rows = Vec::new();
    for dir in runs {
        let label = run_label(dir);
        if !dir.is_dir() {
            eprintln!("warning: run directory {} not found; listed as absent", dir.display());
            rows.push(MetricsRow::absent(&label));
            continue;
        }
        rows.extend(eval_run(cfg, &corpus, dir, &cfg.sampler, &label, worker_count())?);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_metrics(&out.join(METRICS_FILE), &rows)?;
    Ok(rows)
}

/// Grid values in first-seen order with exact duplicates removed.
pub fn dedup_betas(betas: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &b in betas {
        if !out.iter().any(|x| x.total_cmp(&b).is_eq()) {
            out.push(b);
        }
    }
    out
}

/// Aggregate metrics of the configured run for every guidance scale.
pub fn cmd_sweep_guidance(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<(f64, MetricsRow)>> {
    let corpus = open_corpus(cfg)?;
    let run_dir = &cfg.run.run_dir;
    let mut rows = Vec::new();
    for beta in dedup_betas(&cfg.sweep.betas) {
        let sampler = SamplerConfig { beta, ..cfg.sampler.clone() };
        let label = format!("beta={beta}");
        let all = eval_run(cfg, &corpus, run_dir, &sampler, &label, worker_count())?;
        rows.push((beta, all.into_iter().last().expect("aggregate row")));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = csv::Writer::from_path(out.join(SWEEP_FILE))?;
    w.write_record(["beta", "rmse_f0", "mae_e", "timbre_cos"])?;
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (b, r) in &rows {
        w.write_record([b.to_string(), f(r.rmse_f0), f(r.mae_e), f(r.timbre_cos)])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Directory name for an ablation row label.
pub fn ablation_slug(label: &str) -> String {
    let s: String = label.to_lowercase().replace("w/o ", "wo_").chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect();
    s.trim_matches('_').to_string()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: &'static str,
    pub flags: AblationFlags,
    pub run_dir: PathBuf,
    pub metrics: MetricsRow,
}

/// Trains the full model and every single-flag ablation for `cfg.ablate.steps`
/// steps under identical seeds, evaluates each, and writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<AblationRow>> {
    let corpus = open_corpus(cfg)?;
    let table = AblationFlags::table();
    let threads = worker_count();
    let results = map(&table, threads, |_, (label, flags)| -> anyhow::Result<AblationRow> {
        let mut rc = cfg.with_ablation(*flags);
        rc.train.steps = cfg.ablate.steps;
        rc.train.resume = false;
        let dir = out.join("ablate").join(ablation_slug(label));
        rc.run.run_dir = dir.clone();
        train(&rc, &corpus, &dir).with_context(|| format!("training {label}"))?;
        let rows = eval_run(&rc, &corpus, &dir, &rc.sampler, label, 1)?;
        let metrics = rows.into_iter().find(|r| r.sample_id == AGGREGATE_ID).expect("aggregate row");
        Ok(AblationRow { label, flags: *flags, run_dir: dir, metrics })
    });
    let rows = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(ABLATION_FILE))?;
    w.write_record(["label", "rmse_f0", "mae_e", "timbre_cos", "l_total_tail"])?;
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &rows {
        let m = &r.metrics;
        w.write_record([r.label.to_string(), f(m.rmse_f0), f(m.mae_e), f(m.timbre_cos), f(m.l_total_tail)])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Runs the gradient suite over three seeds starting at `seed`.
pub fn cmd_gradcheck(seed: u64, fault: Option<&str>, out: Option<&Path>) -> anyhow::Result<Vec<SuiteRow>> {
    let rows = run_suite(&[seed, seed + 1, seed + 2], fault)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(GRADCHECK_FILE))?;
        w.write_record(["component", "seed", "max_rel_error", "worst_tensor", "status"])?;
        for r in &rows {
            let status = if r.passes() { "pass" } else { "FAIL" };
            w.write_record([r.component.to_string(), r.seed.to_string(), r.max_rel_error.to_string(), r.worst.clone(), status.into()])?;
        }
        w.flush()?;
    }
    Ok(rows)
}
