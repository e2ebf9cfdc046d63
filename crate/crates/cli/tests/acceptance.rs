//! Acceptance suite: prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `cargo test -p hierflow --test acceptance -- --nocapture`.
//! `ACCEPTANCE_ONLY=3,4` restricts the run to the listed criteria.

use std::io::Write;
use std::time::Instant;

use hierflow::commands::{ablation_slug, cmd_ablate, cmd_eval, cmd_gen_data, cmd_sweep_guidance};
use hierflow::config::RunConfig;
use hierflow::evaluate::{rmse_strictly_better, AGGREGATE_ID};
use hierflow::gradsuite::run_suite;
use hierflow::model::{encoder_dims, encoder_input, Model};
use hierflow::toy::{few_step_gap, train_toy, worst_mean_error, ToyModel};
use hierflow::train::{read_total_loss, train, LAYER_WEIGHTS_FILE};
use hierflow_core::diffcore::{ParamStore, Tensor, GRADCHECK_TOLERANCE};
use hierflow_core::flowdec::{
    euler_plain, euler_sample, initial_noise, ot_flow, ot_target_field, DecoderConfig, Prior, SamplerConfig,
    VectorFieldNet,
};
use hierflow_core::hierenc::{encode, AblationFlags, Mode};
use hierflow_core::signal::{energy, estimate_pitch, MelSpectrogram, Waveform};
use hierflow_core::synthdata::{load_corpus, Corpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> anyhow::Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

/// Shared state: the toy model (criteria 3–4) and the corpus plus trained run
/// (criteria 6–8) are built once.
struct Env {
    root: tempfile::TempDir,
    toy: Option<ToyModel>,
    cfg: Option<RunConfig>,
    corpus: Option<Corpus<f64>>,
}

impl Env {
    fn toy(&mut self) -> anyhow::Result<&ToyModel> {
        if self.toy.is_none() {
            self.toy = Some(train_toy(&RunConfig::default().toy, 0)?);
        }
        Ok(self.toy.as_ref().unwrap())
    }

    fn corpus(&mut self) -> anyhow::Result<(RunConfig, &Corpus<f64>)> {
        if self.corpus.is_none() {
            let mut cfg = RunConfig::default();
            cfg.run.corpus_dir = self.root.path().join("corpus");
            cfg.run.run_dir = self.root.path().join("trained");
            cmd_gen_data(&cfg)?;
            self.corpus = Some(load_corpus(&cfg.run.corpus_dir)?);
            self.cfg = Some(cfg);
        }
        Ok((self.cfg.clone().unwrap(), self.corpus.as_ref().unwrap()))
    }
}

fn c1_flow_identities(_: &mut Env) -> anyhow::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = 1e-4;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..20), rng.random_range(1..20));
        let x0 = rand_tensor(&mut rng, r, c);
        let x1 = rand_tensor(&mut rng, r, c);
        worst = worst.max(max_diff(&ot_flow(&x0, &x1, 0.0, s)?, &x0));
        let end = x0.zip_map(&x1, |a, b| s * a + b)?;
        worst = worst.max(max_diff(&ot_flow(&x0, &x1, 1.0, s)?, &end));
        let t = rng.random_range(0.01..0.99);
        let fd = ot_flow(&x0, &x1, t + h, s)?.zip_map(&ot_flow(&x0, &x1, t - h, s)?, |a, b| (a - b) / (2.0 * h))?;
        worst = worst.max(max_diff(&fd, &ot_target_field(&x0, &x1, s)?));
    }
    outcome(worst < 1e-9, format!("max deviation {worst:.2e} over 100 random tensors (tol 1e-9)"))
}

fn c2_gradients(_: &mut Env) -> anyhow::Result<Outcome> {
    let rows = run_suite(&[0, 1, 2], None)?;
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<_> = rows.iter().filter(|r| !r.passes()).map(|r| format!("{}#{}", r.component, r.seed)).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} checks, worst {:.2e} ({} seed {}, tol {GRADCHECK_TOLERANCE:e}){}",
            rows.len(),
            worst.max_rel_error,
            worst.component,
            worst.seed,
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn c3_toy_means(env: &mut Env) -> anyhow::Result<Outcome> {
    let toy = env.toy()?;
    let per_class = 1000 / toy.cfg.means.len();
    let err = worst_mean_error(toy, per_class, 10, 7)?;
    outcome(
        err < 0.15,
        format!("worst class-mean error {err:.4} ({} samples, 10 Euler steps, {} training steps; tol 0.15)", 1000, toy.cfg.steps),
    )
}

fn c4_few_step(env: &mut Env) -> anyhow::Result<Outcome> {
    let toy = env.toy()?;
    let ratio = few_step_gap(toy, 64, 10, 1000, 11)?;
    outcome(ratio < 0.10, format!("10- vs 1000-step endpoint gap {:.2}% of endpoint norm over 64 seeds (tol 10%)", 100.0 * ratio))
}

fn c5_cfg_identity(_: &mut Env) -> anyhow::Result<Outcome> {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = VectorFieldNet::new(&mut ps, &DecoderConfig::default(), 80, 80, &mut rng)?;
    let mu = rand_tensor(&mut rng, 12, 80);
    let sc = SamplerConfig { steps: 10, beta: 0.0, seed: 4 };
    let guided = euler_sample(&net, &ps, &mu, &sc, Prior::Standard)?;
    let plain = euler_plain(&net, &ps, &mu, initial_noise(&mu, mu.cols(), Prior::Standard, 4)?, 10)?;
    let same = max_diff(&guided, &plain);
    let cfg = euler_sample(&net, &ps, &mu, &SamplerConfig { beta: 1.0, ..sc }, Prior::Standard)?;
    let moved = max_diff(&cfg, &plain);
    outcome(same <= 1e-12 && moved > 1e-6, format!("β=0 vs plain Euler {same:.1e} (tol 1e-12); β=1 moves output by {moved:.3}"))
}

fn c6_end_to_end(env: &mut Env) -> anyhow::Result<Outcome> {
    let root = env.root.path().to_path_buf();
    let (cfg, corpus) = env.corpus()?;
    let trained = cfg.run.run_dir.clone();
    let untrained = root.join("untrained");
    train(&cfg, corpus, &trained)?;
    let mut zero = cfg.clone();
    zero.train.steps = 0;
    train(&zero, corpus, &untrained)?;

    let log = read_total_loss(&trained.join("loss.csv"))?;
    let mean = |xs: &[(u64, f64)]| xs.iter().map(|x| x.1).sum::<f64>() / xs.len() as f64;
    let early = mean(&log[99..200]);
    let late = mean(&log[log.len() - 100..]);

    let rows = cmd_eval(&cfg, &[untrained, trained], &root.join("eval"))?;
    let agg: Vec<_> = rows.iter().filter(|r| r.sample_id == AGGREGATE_ID).collect();
    let (u, t) = (agg[0], agg[1]);
    let a = late < 0.5 * early;
    let b = t.mae_e.unwrap() < u.mae_e.unwrap() && rmse_strictly_better(t.rmse_f0, u.rmse_f0);
    let c = t.timbre_cos.unwrap() > u.timbre_cos.unwrap();
    let show = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.3}"));
    outcome(
        a && b && c,
        format!(
            "(a) L_total {late:.0} vs {early:.0} = {:.1}% {}; (b) MAE_E {} vs {}, RMSE_f0 {} vs {} {}; (c) cos {} vs {} {}",
            100.0 * late / early,
            if a { "ok" } else { "FAIL" },
            show(t.mae_e),
            show(u.mae_e),
            show(t.rmse_f0),
            show(u.rmse_f0),
            if b { "ok" } else { "FAIL" },
            show(t.timbre_cos),
            show(u.timbre_cos),
            if c { "ok" } else { "FAIL" },
        ),
    )
}

/// Perturbs every parameter whose name starts with one of `prefixes`.
fn perturb(ps: &mut ParamStore<f64>, prefixes: &[&str], seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0;
    for p in ps.iter_mut().filter(|p| prefixes.iter().any(|x| p.name.starts_with(x))) {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        n += 1;
    }
    n
}

fn mu_shift(cfg: &RunConfig, corpus: &Corpus<f64>, prefixes: &[&str], mode: Mode) -> anyhow::Result<(usize, f64)> {
    let s = &corpus.samples[0];
    let model = Model::new(cfg, encoder_dims(corpus)?, 5)?;
    let input = encoder_input(s);
    let t = s.targets()?;
    let targets = hierflow_core::hierenc::EncoderTargets {
        content_units: t.content_units.clone(),
        timbre: t.timbre_vec.clone(),
        pitch: t.pitch.clone(),
        energy: t.energy.clone(),
    };
    let (before, _) = encode(&model.enc, &model.ps, &input, Some(&targets), mode)?;
    let mut ps = model.ps.clone();
    let n = perturb(&mut ps, prefixes, 9);
    let (after, _) = encode(&model.enc, &ps, &input, Some(&targets), mode)?;
    Ok((n, max_diff(&before, &after)))
}

fn c7_ablation(env: &mut Env) -> anyhow::Result<Outcome> {
    let root = env.root.path().to_path_buf();
    let (cfg, corpus) = env.corpus()?;
    let no_hier = cfg.with_ablation(AblationFlags { hier: false, ..AblationFlags::default() });
    let (n, shift_train) = mu_shift(&no_hier, corpus, &["enc.c2t", "enc.t2p"], Mode::Train)?;
    let (_, shift_infer) = mu_shift(&no_hier, corpus, &["enc.c2t", "enc.t2p"], Mode::Infer)?;
    let structural = n > 0 && shift_train == 0.0 && shift_infer == 0.0;

    let out = root.join("ablate");
    let rows = cmd_ablate(&cfg, &out)?;
    let labels: Vec<_> = rows.iter().map(|r| r.label).collect();
    let expected: Vec<_> = AblationFlags::table().iter().map(|r| r.0).collect();
    let finite = rows.iter().all(|r| r.metrics.is_finite());
    let ws_dir = out.join("ablate").join(ablation_slug("w/o WS"));
    let no_ws_export = !ws_dir.join(LAYER_WEIGHTS_FILE).exists() && out.join("ablate/ours").join(LAYER_WEIGHTS_FILE).exists();
    let bad: Vec<_> = rows.iter().filter(|r| !r.metrics.is_finite()).map(|r| r.label).collect();
    outcome(
        labels == expected && finite && structural && no_ws_export,
        format!(
            "{} rows, finite metrics {}{}; w/o Hier mappers inert ({n} tensors perturbed, μ shift {shift_train:.1e}/{shift_infer:.1e}); w/o WS exports no layer weights: {no_ws_export}; {} steps each",
            rows.len(),
            finite,
            if bad.is_empty() { String::new() } else { format!(" (non-finite: {})", bad.join(", ")) },
            cfg.ablate.steps
        ),
    )
}

fn c8_sweep(env: &mut Env) -> anyhow::Result<Outcome> {
    let root = env.root.path().to_path_buf();
    let (cfg, _) = env.corpus()?;
    if !cfg.run.run_dir.join("checkpoint.bin").exists() {
        let corpus = env.corpus.as_ref().unwrap();
        train(&cfg, corpus, &cfg.run.run_dir)?;
    }
    let rows = cmd_sweep_guidance(&cfg, &root.join("sweep"))?;
    let betas: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let finite = rows.iter().all(|r| r.1.is_finite());
    let summary: Vec<_> = rows.iter().map(|(b, r)| format!("β={b}: MAE_E {:.2}", r.mae_e.unwrap_or(f64::NAN))).collect();
    outcome(
        betas == [0.0, 0.5, 0.7, 1.0, 2.0, 4.0] && finite,
        format!("{} rows, finite {finite}; {}", rows.len(), summary.join(", ")),
    )
}

fn c9_dsp(env: &mut Env) -> anyhow::Result<Outcome> {
    let sr = 16000.0;
    let tone: Vec<f64> = (0..16000).map(|n| 0.5 * (2.0 * std::f64::consts::PI * 220.0 * n as f64 / sr).sin()).collect();
    let track = estimate_pitch(&Waveform::new(tone, 16000)?);
    let voiced: Vec<f64> = track.f0.iter().zip(&track.voiced).filter(|(_, v)| **v).map(|(f, _)| *f).collect();
    let pitch_err = voiced.iter().map(|f| (f - 220.0).abs()).fold(0.0, f64::max);
    let pitch_ok = !voiced.is_empty() && pitch_err <= 3.0;

    let e = energy(&MelSpectrogram::new(Tensor::full(&[1, 80], 1.0))?)[0];
    let energy_ok = (e - 80f64.sqrt()).abs() < 1e-9;

    let (_, corpus) = env.corpus()?;
    let mut moment_err = 0.0f64;
    let mut frames_ok = true;
    for s in &corpus.samples {
        frames_ok &= s.mel_frames() == 2 * s.video_frames() && s.mel.num_frames() == 2 * s.video_frames();
        let t = s.targets()?;
        let v: Vec<f64> = t.pitch.iter().zip(&t.f0.voiced).filter(|(_, v)| **v).map(|(p, _)| *p).collect();
        if v.len() >= 2 {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            moment_err = moment_err.max(mean.abs()).max((sd - 1.0).abs());
        }
    }
    let moments_ok = moment_err < 1e-9;
    outcome(
        pitch_ok && energy_ok && moments_ok && frames_ok,
        format!(
            "220 Hz max error {pitch_err:.2} Hz on {} voiced frames; ‖1‖ energy error {:.1e}; pitch moments error {moment_err:.1e}; mel = 2×video on all {} samples: {frames_ok}",
            voiced.len(),
            (e - 80f64.sqrt()).abs(),
            corpus.samples.len()
        ),
    )
}

fn c10_teacher_forcing(env: &mut Env) -> anyhow::Result<Outcome> {
    let (cfg, corpus) = env.corpus()?;
    let (n, train_shift) = mu_shift(&cfg, corpus, &["enc.cp"], Mode::Train)?;
    let (_, infer_shift) = mu_shift(&cfg, corpus, &["enc.cp"], Mode::Infer)?;
    outcome(
        n > 0 && train_shift <= 1e-12 && infer_shift > 1e-9,
        format!("{n} content-predictor tensors perturbed: train-mode μ shift {train_shift:.1e} (tol 1e-12), infer-mode shift {infer_shift:.3}"),
    )
}

type Criterion = fn(&mut Env) -> anyhow::Result<Outcome>;

#[test]
fn acceptance() {
    let criteria: [(u32, &str, Criterion); 10] = [
        (1, "analytic flow identities", c1_flow_identities),
        (2, "gradient suite", c2_gradients),
        (3, "2-D toy CFM class means", c3_toy_means),
        (4, "few-step fidelity", c4_few_step),
        (5, "CFG identity", c5_cfg_identity),
        (6, "end-to-end toy VTS", c6_end_to_end),
        (7, "ablation harness", c7_ablation),
        (8, "guidance sweep", c8_sweep),
        (9, "DSP", c9_dsp),
        (10, "teacher forcing", c10_teacher_forcing),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut env = Env { root: tempfile::tempdir().unwrap(), toy: None, cfg: None, corpus: None };
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run(&mut env) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let secs = start.elapsed().as_secs_f64();
        let line = format!("criterion {id:>2} [{}] {name}: {detail} ({secs:.1} s)\n", if pass { "PASS" } else { "FAIL" });
        // Written to the raw handle so the report shows without --nocapture.
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
