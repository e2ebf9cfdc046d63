use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use hierflow::commands::*;
use hierflow::gradsuite::FAULT_ENV;
use hierflow::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    GenData,
    Train,
    Sample,
    Eval,
    SweepGuidance,
    Ablate,
    Gradcheck,
}

/// Hierarchical video-to-speech toolkit on a synthetic corpus.
#[derive(Parser, Debug)]
#[command(name = "hierflow", version)]
struct Cli {
    command: Command,
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (the sampler seed for sample/eval/sweep-guidance).
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps (train, ablate) or Euler steps (sample, eval, sweep-guidance).
    #[arg(long)]
    steps: Option<u64>,
    /// Guidance scale for sample and eval.
    #[arg(long)]
    beta: Option<f64>,
    /// Output directory: corpus for gen-data, run directory for train, results directory otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sample ids (sample) or run directories (eval).
    args: Vec<String>,
}

enum Failure {
    /// Bad invocation, configuration or file access.
    Usage(anyhow::Error),
    /// A check or metric did not hold.
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let non_finite = e.chain().any(|c| matches!(c.downcast_ref(), Some(hierflow_core::Error::NonFinite(_))));
        if non_finite {
            Failure::Check(format!("{e:#}"))
        } else {
            Failure::Usage(e)
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config PATH is required"))?;
    Ok(RunConfig::load(path)?)
}

fn reject(cli: &Cli, beta: bool, args: bool) -> Result<(), Failure> {
    if beta && cli.beta.is_some() {
        return Err(usage(format!("--beta is not accepted by {:?}", cli.command)));
    }
    if args && !cli.args.is_empty() {
        return Err(usage(format!("unexpected arguments: {}", cli.args.join(" "))));
    }
    Ok(())
}

fn sampler_overrides(cli: &Cli, cfg: &mut RunConfig) -> Result<(), Failure> {
    if let Some(s) = cli.seed {
        cfg.sampler.seed = s;
    }
    if let Some(n) = cli.steps {
        cfg.sampler.steps = n as usize;
    }
    if let Some(b) = cli.beta {
        cfg.sampler.beta = b;
    }
    cfg.sampler.validate().map_err(|e| Failure::Usage(e.into()))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.command == Command::Gradcheck {
        reject(cli, true, true)?;
        let fault = std::env::var(FAULT_ENV).ok();
        let rows = cmd_gradcheck(cli.seed.unwrap_or(0), fault.as_deref(), cli.out.as_deref())?;
        let mut failed = 0;
        for r in &rows {
            let status = if r.passes() { "pass" } else { "FAIL" };
            println!("{:<20} seed {} max rel error {:.3e} ({}) {status}", r.component, r.seed, r.max_rel_error, r.worst);
            failed += usize::from(!r.passes());
        }
        return if failed == 0 {
            println!("gradient suite: all {} checks pass", rows.len());
            Ok(())
        } else {
            Err(Failure::Check(format!("{failed} of {} gradient checks exceed tolerance", rows.len())))
        };
    }

    let mut cfg = load_config(cli)?;
    match cli.command {
        Command::GenData => {
            reject(cli, true, true)?;
            if let Some(s) = cli.seed {
                cfg.run.seed = s;
            }
            if let Some(o) = &cli.out {
                cfg.run.corpus_dir = o.clone();
            }
            let corpus = cmd_gen_data(&cfg)?;
            println!("wrote {} samples to {}", corpus.samples.len(), cfg.run.corpus_dir.display());
        }
        Command::Train => {
            reject(cli, true, true)?;
            if let Some(s) = cli.seed {
                cfg.run.seed = s;
            }
            if let Some(n) = cli.steps {
                cfg.train.steps = n;
            }
            if let Some(o) = &cli.out {
                cfg.run.run_dir = o.clone();
            }
            let s = cmd_train(&cfg)?;
            if let Some((step, l)) = s.losses.last() {
                println!("step {step}: L_total {:.4} (L_cfm {:.4}, L_enc {:.4})", l.l_total, l.l_cfm, l.l_enc);
            }
            println!("checkpoint at step {} in {}", s.last_step, cfg.run.run_dir.display());
        }
        Command::Sample => {
            sampler_overrides(cli, &mut cfg)?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.run.run_dir.clone());
            for dir in cmd_sample(&cfg, &cli.args, &out)? {
                println!("wrote {}", dir.display());
            }
        }
        Command::Eval => {
            sampler_overrides(cli, &mut cfg)?;
            let runs: Vec<PathBuf> = if cli.args.is_empty() {
                vec![cfg.run.run_dir.clone()]
            } else {
                cli.args.iter().map(PathBuf::from).collect()
            };
            let out = cli.out.clone().unwrap_or_else(|| cfg.run.run_dir.clone());
            let rows = cmd_eval(&cfg, &runs, &out)?;
            for r in rows.iter().filter(|r| r.sample_id == hierflow::evaluate::AGGREGATE_ID) {
                println!(
                    "{}: {} rmse_f0 {:?} mae_e {:?} timbre_cos {:?}",
                    r.run, r.status, r.rmse_f0, r.mae_e, r.timbre_cos
                );
            }
            if rows.iter().any(|r| !r.is_well_formed()) {
                return Err(Failure::Check("non-finite metrics".into()));
            }
        }
        Command::SweepGuidance => {
            reject(cli, true, true)?;
            sampler_overrides(cli, &mut cfg)?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.run.run_dir.clone());
            let rows = cmd_sweep_guidance(&cfg, &out)?;
            for (b, r) in &rows {
                println!("beta {b}: rmse_f0 {:?} mae_e {:?} timbre_cos {:?}", r.rmse_f0, r.mae_e, r.timbre_cos);
            }
            if rows.iter().any(|(_, r)| !r.is_well_formed()) {
                return Err(Failure::Check("non-finite sweep metrics".into()));
            }
        }
        Command::Ablate => {
            reject(cli, true, true)?;
            if let Some(s) = cli.seed {
                cfg.run.seed = s;
            }
            if let Some(n) = cli.steps {
                cfg.ablate.steps = n;
            }
            let out = cli.out.clone().unwrap_or_else(|| cfg.run.run_dir.clone());
            let rows = cmd_ablate(&cfg, &out)?;
            for r in &rows {
                let m = &r.metrics;
                println!("{:<12} rmse_f0 {:?} mae_e {:?} timbre_cos {:?}", r.label, m.rmse_f0, m.mae_e, m.timbre_cos);
            }
            if rows.iter().any(|r| !r.metrics.is_well_formed()) {
                return Err(Failure::Check("non-finite ablation metrics".into()));
            }
        }
        Command::Gradcheck => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
