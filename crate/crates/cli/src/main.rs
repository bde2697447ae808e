//! `cresp` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 failed oracle audit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cresp::agent::Objective;
use cresp::config::{parse_config, RunConfig};
use cresp::runner;

#[derive(Parser)]
#[command(
    name = "cresp",
    version,
    about = "Reward-sequence representation learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seeds` in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    reward_length: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one agent per seed into `<out_dir>/<objective>_s<seed>`.
    Train(Common),
    /// Evaluate a checkpoint on the held-out environments.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train env-label and latent probes on a frozen encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV; defaults to `probe.csv` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit the value-gap bound on random tabular models.
    OracleVerify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "oracle_verify.csv")]
        out: PathBuf,
    },
    /// Train the cross product of objectives, reward lengths and seeds.
    Sweep(Common),
    /// Write `(z, latent, env_id)` rows for a checkpoint.
    ExportRepr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(o) = common.objective {
        cfg.agent.objective = o;
    }
    if let Some(s) = common.steps {
        cfg.train.steps = s;
    }
    if let Some(t) = common.reward_length {
        cfg.agent.predictor.reward_length = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn first_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

fn train(cfg: &RunConfig) -> Result<()> {
    for &seed in &cfg.seeds {
        let dir = cfg.out_dir.join(format!("{}_s{seed}", cfg.agent.objective));
        let rows = runner::run_train(cfg, seed, &dir)?;
        if let Some(last) = rows.last() {
            println!(
                "{}: test return {:.3} ± {:.3} after {} env steps",
                dir.display(),
                last.test_return_mean,
                last.test_return_std,
                last.env_steps
            );
        }
    }
    Ok(())
}

fn probe_out(checkpoint: &Path, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("probe.csv"))
}

/// Ok(true) on success, Ok(false) on a failed audit or sweep.
fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Train(c) => {
            train(&load(&c)?)?;
            Ok(true)
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let (mean, std) = runner::run_eval(&cfg, first_seed(&cfg), &checkpoint)?;
            println!(
                "test return {mean:.4} ± {std:.4} over {} episodes",
                cfg.train.eval_episodes
            );
            Ok(true)
        }
        Cmd::Probe {
            common,
            checkpoint,
            out,
        } => {
            let cfg = load(&common)?;
            let rows = runner::run_probe(&cfg, first_seed(&cfg), &checkpoint)?;
            let out = probe_out(&checkpoint, out);
            runner::write_probe_rows(&out, &rows)?;
            for r in &rows {
                println!(
                    "probe seed {}: env-label CE {:.4}, latent loss {:.4}",
                    r.probe_seed, r.env_label_ce, r.latent_loss
                );
            }
            Ok(true)
        }
        Cmd::OracleVerify { common, out } => {
            let cfg = load(&common)?;
            let rows = runner::oracle_verify(&cfg, first_seed(&cfg))?;
            runner::write_audit_rows(&out, &rows)?;
            let failed = rows.iter().filter(|r| !r.pass).count();
            println!("{} checks, {failed} failed; written to {}", rows.len(), out.display());
            Ok(failed == 0)
        }
        Cmd::Sweep(c) => {
            let cfg = load(&c)?;
            let (rows, ok) = runner::run_sweep(&cfg)?;
            for r in &rows {
                println!("{} T={} seed={}: {}", r.objective, r.reward_length, r.seed, r.status);
            }
            Ok(ok)
        }
        Cmd::ExportRepr {
            common,
            checkpoint,
            n,
            out,
        } => {
            let cfg = load(&common)?;
            runner::export_repr(&cfg, first_seed(&cfg), &checkpoint, n, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let is_audit = matches!(cli.cmd, Cmd::OracleVerify { .. });
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if is_audit => ExitCode::from(3),
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<cresp::Error>(), Some(cresp::Error::Config { .. })));
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
