//! Run orchestration: every subcommand of the binary is a function here so
//! tests can drive the same code paths.
//!
//! A training run directory holds `config.toml` (resolved configuration),
//! `manifest.toml` (version and seed derivations), `metrics.csv` and the
//! final parameters under `checkpoint/`.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::train::{evaluate, MetricsRow, MetricsWriter, Trainer};
use crate::agent::{Agent, Objective};
use crate::config::{Manifest, RunConfig};
use crate::env::{spawn_family, Env};
use crate::error::{Error, Result};
use crate::probes::{collect_probe_dataset, run_probes, ProbeScores};
use crate::seeding::{rng_for, Stream};
use crate::tabular::{theorem1_gap, RandomSpec, TabularPOMDP};

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the resolved config and the manifest into `dir`.
pub fn write_provenance(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    std::fs::write(dir.join("manifest.toml"), Manifest::new(cfg, seed).to_toml())?;
    Ok(())
}

/// Trains one agent and leaves a complete run directory behind.
pub fn run_train(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<Vec<MetricsRow>> {
    write_provenance(cfg, seed, dir)?;
    let spec = cfg.env_spec(seed)?;
    let mut trainer = Trainer::new(cfg.agent.clone(), &spec, cfg.train.clone(), seed)?;
    let mut writer = MetricsWriter::new(File::create(dir.join("metrics.csv"))?);
    let rows = trainer.run(|row| writer.write(row))?;
    trainer.agent.save(&dir.join("checkpoint"))?;
    Ok(rows)
}

/// Agent with the architecture of `cfg` and the parameters in `checkpoint`.
pub fn load_agent(cfg: &RunConfig, seed: u64, checkpoint: &Path) -> Result<(Agent, Vec<Env>, Vec<Env>)> {
    let spec = cfg.env_spec(seed)?;
    let (train, test) = spawn_family(&spec, cfg.train.n_train_envs, cfg.train.n_test_envs)?;
    let mut agent = Agent::new(cfg.agent.clone(), &spec.obs_shape(), spec.action_dim(), seed)?;
    agent.load(checkpoint)?;
    Ok((agent, train, test))
}

/// Deterministic-policy return on the held-out environments.
pub fn run_eval(cfg: &RunConfig, seed: u64, checkpoint: &Path) -> Result<(f64, f64)> {
    let (mut agent, _, test) = load_agent(cfg, seed, checkpoint)?;
    evaluate(&mut agent, &test, cfg.train.eval_episodes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub objective: String,
    pub seed: u64,
    pub probe_seed: usize,
    pub env_label_ce: f64,
    pub latent_loss: f64,
}

/// Probes the encoder in `checkpoint` on data from the whole family.
pub fn run_probe(cfg: &RunConfig, seed: u64, checkpoint: &Path) -> Result<Vec<ProbeRow>> {
    let (agent, mut envs, test) = load_agent(cfg, seed, checkpoint)?;
    envs.extend(test);
    let ds = collect_probe_dataset(&agent, &envs, cfg.probe.n, seed)?;
    let ProbeScores {
        env_label_ce,
        latent_loss,
    } = run_probes(&ds, &cfg.probe, seed)?;
    Ok(env_label_ce
        .into_iter()
        .zip(latent_loss)
        .enumerate()
        .map(|(k, (ce, ll))| ProbeRow {
            objective: cfg.agent.objective.to_string(),
            seed,
            probe_seed: k,
            env_label_ce: ce,
            latent_loss: ll,
        })
        .collect())
}

pub fn write_probe_rows(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    write_csv(path, rows)
}

/// One line of the value-gap audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub instance: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_rewards: usize,
    pub gamma: f64,
    pub horizon: usize,
    pub n_blocks: usize,
    pub min_gap: f64,
    pub max_gap: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Random instance `i` of the audit: up to 6 states, 3 actions and 3
/// reward values, discount drawn from {0.8, 0.9, 0.95}.
pub fn audit_instance(seed: u64, i: usize) -> Result<TabularPOMDP> {
    let mut rng = rng_for(seed, Stream::Oracle, i as u64);
    let spec = RandomSpec {
        n_states: rng.random_range(2..=6),
        n_actions: rng.random_range(1..=3),
        n_rewards: rng.random_range(2..=3),
        gamma: *[0.8, 0.9, 0.95].choose(&mut rng).expect("non-empty"),
        n_profiles: rng.random_range(1..=3),
        stochastic_rewards: rng.random_bool(0.5),
    };
    TabularPOMDP::random(&spec, &mut rng)
}

/// Checks `0 ≤ V* − V̄*∘Φ ≤ 2γᵀr̄/(1−γ)` for every instance and horizon.
pub fn oracle_verify(cfg: &RunConfig, seed: u64) -> Result<Vec<AuditRow>> {
    let mut rows = Vec::new();
    for i in 0..cfg.oracle.instances {
        let m = audit_instance(seed, i)?;
        for &t in &cfg.oracle.horizons {
            let g = theorem1_gap(&m, t)?;
            rows.push(AuditRow {
                instance: i,
                n_states: m.n_states,
                n_actions: m.n_actions,
                n_rewards: m.reward_support.len(),
                gamma: m.gamma,
                horizon: t,
                n_blocks: g.n_blocks,
                min_gap: g.min_gap,
                max_gap: g.max_gap,
                bound: g.bound,
                pass: g.pass,
            });
        }
    }
    Ok(rows)
}

pub fn write_audit_rows(path: &Path, rows: &[AuditRow]) -> Result<()> {
    write_csv(path, rows)
}

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepJob {
    pub objective: Objective,
    pub reward_length: usize,
    pub seed: u64,
}

impl SweepJob {
    pub fn dir_name(&self) -> String {
        format!("{}_T{}_s{}", self.objective, self.reward_length, self.seed)
    }
}

/// Cross product objectives × reward lengths × seeds.
pub fn sweep_jobs(cfg: &RunConfig) -> Vec<SweepJob> {
    let objectives = if cfg.sweep.objectives.is_empty() {
        vec![cfg.agent.objective]
    } else {
        cfg.sweep.objectives.clone()
    };
    let mut jobs = Vec::new();
    for &objective in &objectives {
        let lengths = if cfg.sweep.reward_lengths.is_empty() {
            let mut a = cfg.agent.clone();
            a.objective = objective;
            vec![a.reward_length()]
        } else {
            cfg.sweep.reward_lengths.clone()
        };
        for &reward_length in &lengths {
            for &seed in &cfg.seeds {
                jobs.push(SweepJob {
                    objective,
                    reward_length,
                    seed,
                });
            }
        }
    }
    jobs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub objective: String,
    pub reward_length: usize,
    pub seed: u64,
    pub dir: String,
    pub status: String,
    pub final_test_return: Option<f64>,
    pub env_label_ce: Option<f64>,
    pub latent_loss: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_job(cfg: &RunConfig, job: &SweepJob, dir: &Path, probe: bool) -> Result<SummaryRow> {
    let mut c = cfg.clone();
    c.agent.objective = job.objective;
    c.agent.predictor.reward_length = Some(job.reward_length);
    c.seeds = vec![job.seed];
    c.validate()?;
    let rows = run_train(&c, job.seed, dir)?;
    let mut out = SummaryRow {
        objective: job.objective.to_string(),
        reward_length: job.reward_length,
        seed: job.seed,
        dir: dir.display().to_string(),
        status: "ok".into(),
        final_test_return: rows.last().map(|r| r.test_return_mean),
        env_label_ce: None,
        latent_loss: None,
    };
    if probe {
        let p = run_probe(&c, job.seed, &dir.join("checkpoint"))?;
        write_probe_rows(&dir.join("probe.csv"), &p)?;
        let ce: Vec<f64> = p.iter().map(|r| r.env_label_ce).collect();
        let ll: Vec<f64> = p.iter().map(|r| r.latent_loss).collect();
        out.env_label_ce = Some(mean(&ce));
        out.latent_loss = Some(mean(&ll));
    }
    Ok(out)
}

/// Runs every sweep cell under `cfg.out_dir`, then writes `summary.csv`.
/// A failing cell is recorded and the remaining cells still run; the
/// returned flag is false if any cell failed.
pub fn run_sweep(cfg: &RunConfig) -> Result<(Vec<SummaryRow>, bool)> {
    let jobs = sweep_jobs(cfg);
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("sweep.toml"), cfg.to_toml())?;
    let results: Mutex<Vec<Option<SummaryRow>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = cfg.sweep.workers.unwrap_or(1).min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let dir: PathBuf = cfg.out_dir.join(job.dir_name());
                let row = run_job(cfg, job, &dir, cfg.sweep.probe).unwrap_or_else(|e| SummaryRow {
                    objective: job.objective.to_string(),
                    reward_length: job.reward_length,
                    seed: job.seed,
                    dir: dir.display().to_string(),
                    status: format!("failed: {e}"),
                    final_test_return: None,
                    env_label_ce: None,
                    latent_loss: None,
                });
                results.lock().expect("no worker panics while holding the lock")[i] = Some(row);
            });
        }
    });
    let rows: Vec<SummaryRow> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every job produced a row"))
        .collect();
    write_csv(&cfg.out_dir.join("summary.csv"), &rows)?;
    let ok = rows.iter().all(|r| r.status == "ok");
    Ok((rows, ok))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Writes `(z_0.., latent_0.., env_id)` rows for `n` transitions collected
/// by the encoder in `checkpoint` across the whole family.
pub fn export_repr(cfg: &RunConfig, seed: u64, checkpoint: &Path, n: usize, out: &Path) -> Result<()> {
    let (agent, mut envs, test) = load_agent(cfg, seed, checkpoint)?;
    envs.extend(test);
    let ds = collect_probe_dataset(&agent, &envs, n, seed)?;
    let ld = ds.latents.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(out).map_err(csv_err)?;
    let header: Vec<String> = (0..ds.dim)
        .map(|k| format!("z{k}"))
        .chain((0..ld).map(|k| format!("latent{k}")))
        .chain(std::iter::once("env_id".to_string()))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let rec: Vec<String> = ds.features[i * ds.dim..(i + 1) * ds.dim]
            .iter()
            .chain(&ds.latents[i])
            .map(|v| v.to_string())
            .chain(std::iter::once(ds.env_labels[i].to_string()))
            .collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
