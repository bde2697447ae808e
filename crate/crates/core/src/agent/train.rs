//! Online training loop: round-robin rollouts over the training
//! environments, SAC and auxiliary updates, periodic held-out evaluation.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, AgentConfig};
use crate::env::{spawn_family, Env, EnvSpec};
use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::seeding::{derive_seed, rng_for, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total environment steps summed over all training environments.
    pub steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub n_train_envs: usize,
    pub n_test_envs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            eval_every: 5_000,
            eval_episodes: 10,
            n_train_envs: 2,
            n_test_envs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: &str| Error::Config {
            key: key.into(),
            msg: msg.into(),
        };
        if self.steps == 0 {
            return Err(err("train.steps", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(err("train.eval_every", "must be positive"));
        }
        if self.eval_episodes == 0 {
            return Err(err("train.eval_episodes", "must be positive"));
        }
        if self.n_train_envs == 0 {
            return Err(err("train.n_train_envs", "must be positive"));
        }
        if self.n_test_envs == 0 {
            return Err(err("train.n_test_envs", "must be positive"));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Gradient updates performed so far.
    pub step: u64,
    pub env_steps: u64,
    pub objective: String,
    /// Mean return of training episodes finished since the previous row.
    pub train_return: Option<f64>,
    pub test_return_mean: f64,
    pub test_return_std: f64,
    /// Means over the updates since the previous row.
    pub sac_critic_loss: Option<f64>,
    pub aux_loss: Option<f64>,
    pub alpha: f64,
}

/// CSV sink for [`MetricsRow`]s; writes the header on creation.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(true).from_writer(w),
        }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a metrics CSV back.
pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Episode seeds used for evaluation; identical at every checkpoint.
pub fn eval_seed(k: usize) -> u64 {
    derive_seed(0, Stream::Eval, k as u64)
}

/// Mean and population standard deviation of deterministic-policy returns
/// over `episodes` episodes, assigned round-robin to `envs`. All episodes
/// advance in lockstep so the policy runs on one batch per time step.
pub fn evaluate(agent: &mut Agent, envs: &[Env], episodes: usize) -> Result<(f64, f64)> {
    let mut runs: Vec<Env> = (0..episodes).map(|k| envs[k % envs.len()].clone()).collect();
    let mut obs = Vec::with_capacity(episodes * agent.obs_dim());
    for (k, env) in runs.iter_mut().enumerate() {
        let (o, _, _) = env.reset(eval_seed(k))?;
        obs.extend_from_slice(&o.data);
    }
    let adim = agent.action_dim();
    let mut returns = vec![0.0; episodes];
    let mut live: Vec<usize> = (0..episodes).collect();
    while !live.is_empty() {
        let actions = agent.act(&obs, true)?;
        let mut next_obs = Vec::with_capacity(obs.len());
        let mut still = Vec::with_capacity(live.len());
        for (i, &k) in live.iter().enumerate() {
            let out = runs[k].step(&actions[i * adim..(i + 1) * adim])?;
            returns[k] += out.reward;
            if !out.done {
                still.push(k);
                next_obs.extend_from_slice(&out.obs.data);
            }
        }
        live = still;
        obs = next_obs;
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Default)]
struct Window {
    returns: Vec<f64>,
    critic: Vec<f64>,
    aux: Vec<f64>,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Owns the agent, the environments and the replay buffer of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub agent: Agent,
    pub train_envs: Vec<Env>,
    pub test_envs: Vec<Env>,
    pub replay: ReplayBuffer,
    replay_rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
    obs: Vec<Vec<f64>>,
    ep_return: Vec<f64>,
    episodes: Vec<u64>,
    env_steps: u64,
    window: Window,
}

impl Trainer {
    pub fn new(agent_cfg: AgentConfig, env: &EnvSpec, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        env.validate()?;
        let (train_envs, test_envs) = spawn_family(env, cfg.n_train_envs, cfg.n_test_envs)?;
        let obs_shape = env.obs_shape();
        let capacity = agent_cfg.sac.buffer_capacity;
        let agent = Agent::new(agent_cfg, &obs_shape, env.action_dim(), seed)?;
        let replay = ReplayBuffer::new(capacity, agent.obs_dim(), agent.action_dim())?;
        let n = train_envs.len();
        let mut t = Self {
            cfg,
            agent,
            train_envs,
            test_envs,
            replay,
            replay_rng: rng_for(seed, Stream::Replay, 0),
            explore_rng: rng_for(seed, Stream::Exploration, 0),
            obs: vec![Vec::new(); n],
            ep_return: vec![0.0; n],
            episodes: vec![0; n],
            env_steps: 0,
            window: Window::default(),
        };
        for j in 0..n {
            t.reset_env(j)?;
        }
        Ok(t)
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    fn reset_env(&mut self, j: usize) -> Result<()> {
        let seed = ((j as u64) << 32) | self.episodes[j];
        let (o, _, _) = self.train_envs[j].reset(seed)?;
        self.obs[j] = o.data;
        self.ep_return[j] = 0.0;
        Ok(())
    }

    /// One environment step in training environment `j`, followed by the
    /// gradient updates once the warm-up is over.
    fn step_env(&mut self, j: usize) -> Result<()> {
        let adim = self.agent.action_dim();
        let warm = self.env_steps < self.agent.config().sac.init_steps as u64;
        let action: Vec<f64> = if warm {
            (0..adim).map(|_| self.explore_rng.random_range(-1.0..1.0)).collect()
        } else {
            self.agent.act(&self.obs[j], false)?
        };
        let out = self.train_envs[j].step(&action)?;
        self.replay
            .push(&self.obs[j], &action, out.reward, &out.obs.data, out.done, j)?;
        self.ep_return[j] += out.reward;
        self.env_steps += 1;
        if out.done {
            self.window.returns.push(self.ep_return[j]);
            self.episodes[j] += 1;
            self.reset_env(j)?;
        } else {
            self.obs[j] = out.obs.data;
        }
        if !warm {
            let (sac, aux) = self.agent.update(&self.replay, &mut self.replay_rng)?;
            self.window.critic.push(sac.critic_loss);
            if let Some(a) = aux {
                self.window.aux.push(a);
            }
        }
        Ok(())
    }

    /// Evaluates on the test environments and drains the loss window.
    pub fn checkpoint_row(&mut self) -> Result<MetricsRow> {
        let (mean, std) = evaluate(&mut self.agent, &self.test_envs, self.cfg.eval_episodes)?;
        let w = std::mem::take(&mut self.window);
        Ok(MetricsRow {
            step: self.agent.updates(),
            env_steps: self.env_steps,
            objective: self.agent.config().objective.to_string(),
            train_return: mean_of(&w.returns),
            test_return_mean: mean,
            test_return_std: std,
            sac_critic_loss: mean_of(&w.critic),
            aux_loss: mean_of(&w.aux),
            alpha: self.agent.alpha(),
        })
    }

    /// Advances until `target` total environment steps (capped at the
    /// configured budget), cycling through the training environments.
    pub fn advance_to(&mut self, target: u64) -> Result<()> {
        let target = target.min(self.cfg.steps);
        let n = self.train_envs.len() as u64;
        while self.env_steps < target {
            self.step_env((self.env_steps % n) as usize)?;
        }
        Ok(())
    }

    /// Runs the whole budget, handing each evaluation row to `on_row`.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.env_steps < self.cfg.steps {
            let next = (self.env_steps / self.cfg.eval_every + 1) * self.cfg.eval_every;
            self.advance_to(next)?;
            let row = self.checkpoint_row()?;
            on_row(&row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}
