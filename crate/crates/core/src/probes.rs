//! Supervised probes on frozen representations.
//!
//! A probe is a small classifier or regressor trained on `(z, target)` pairs.
//! Its best held-out loss measures how much information about the target the
//! features carry: lower loss means more information.

use cresp_tensor::nn::Mlp;
use cresp_tensor::{Adam, AdamConfig, Grads, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::env::Env;
use crate::error::{invalid, Error, Result};
use crate::seeding::{rng_for, Stream};

/// Smallest dataset accepted by [`collect_probe_dataset`].
pub const MIN_PROBE_ROWS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Transitions collected over the whole family (reference 100K).
    pub n: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    /// Probe seeds per encoder.
    pub seeds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n: 20_000,
            hidden: 256,
            lr: 1e-3,
            epochs: 50,
            eval_every: 10,
            batch_size: 256,
            seeds: 3,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: &str| Error::Config {
            key: key.into(),
            msg: msg.into(),
        };
        if self.n < MIN_PROBE_ROWS {
            return Err(err("probe.n", "needs at least 10 rows"));
        }
        if self.hidden == 0 {
            return Err(err("probe.hidden", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(err("probe.lr", "must be positive"));
        }
        if self.epochs == 0 || self.eval_every == 0 || self.eval_every > self.epochs {
            return Err(err("probe.eval_every", "must lie in [1, epochs]"));
        }
        if self.batch_size == 0 {
            return Err(err("probe.batch_size", "must be positive"));
        }
        if self.seeds == 0 {
            return Err(err("probe.seeds", "must be positive"));
        }
        Ok(())
    }
}

/// What the latent probe predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentTarget {
    /// Discrete latent with this many classes (cross-entropy).
    Classes(usize),
    /// Continuous latent of this dimension (mean squared error).
    Continuous(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    /// `rows × dim` features, row-major.
    pub features: Vec<f64>,
    pub dim: usize,
    pub latents: Vec<Vec<f64>>,
    pub distractors: Vec<Vec<f64>>,
    pub env_labels: Vec<usize>,
    pub n_envs: usize,
    pub latent_target: LatentTarget,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.env_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.env_labels.is_empty()
    }

    /// The same rows and split with different features.
    pub fn with_features(&self, features: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != self.len() * dim {
            return Err(Error::Length {
                what: "probe features vs rows*dim",
                left: features.len(),
                right: self.len() * dim,
            });
        }
        Ok(Self {
            features,
            dim,
            ..self.clone()
        })
    }

    /// Class index of row `i` for a discrete latent.
    fn latent_class(&self, i: usize) -> usize {
        let s = &self.latents[i];
        match (self.latent_target, s.len()) {
            (LatentTarget::Classes(n), 2) => {
                let side = (n as f64).sqrt().round() as usize;
                s[0] as usize * side + s[1] as usize
            }
            _ => s[0] as usize,
        }
    }

    /// True latent state as features: one-hot for discrete latents, raw
    /// coordinates otherwise.
    pub fn latent_oracle(&self) -> Result<Self> {
        match self.latent_target {
            LatentTarget::Classes(n) => {
                let mut f = vec![0.0; self.len() * n];
                for i in 0..self.len() {
                    f[i * n + self.latent_class(i)] = 1.0;
                }
                self.with_features(f, n)
            }
            LatentTarget::Continuous(d) => self.with_features(self.latents.concat(), d),
        }
    }

    /// Full distractor state as features: its coordinates followed by a
    /// one-hot environment label.
    pub fn distractor_oracle(&self) -> Result<Self> {
        let xd = self.distractors.first().map_or(0, Vec::len);
        let dim = xd + self.n_envs;
        let mut f = Vec::with_capacity(self.len() * dim);
        for (x, &e) in self.distractors.iter().zip(&self.env_labels) {
            f.extend_from_slice(x);
            f.extend((0..self.n_envs).map(|k| if k == e { 1.0 } else { 0.0 }));
        }
        self.with_features(f, dim)
    }

    /// Standard normal features carrying no information.
    pub fn noise(&self, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let f = (0..self.len() * dim).map(|_| StandardNormal.sample(rng)).collect();
        self.with_features(f, dim)
    }
}

/// Rolls the agent's stochastic policy in every environment of `envs`,
/// giving each an equal share of `n` rows, and encodes the observations
/// once. Rows are split 80/20 into train and eval at random.
pub fn collect_probe_dataset(agent: &Agent, envs: &[Env], n: usize, seed: u64) -> Result<ProbeDataset> {
    if n < MIN_PROBE_ROWS {
        return Err(invalid(format!(
            "probe dataset needs at least {MIN_PROBE_ROWS} rows, got {n}"
        )));
    }
    if envs.is_empty() {
        return Err(invalid("probe dataset needs at least one environment"));
    }
    let mut policy_rng = rng_for(seed, Stream::Probe, 0);
    let mut obs_all = Vec::new();
    let (mut latents, mut distractors, mut env_labels) = (Vec::new(), Vec::new(), Vec::new());
    for (e, proto) in envs.iter().enumerate() {
        let share = n / envs.len() + usize::from(e < n % envs.len());
        let mut env = proto.clone();
        let mut episode = 0u64;
        let (mut obs, _, _) = env.reset(((e as u64) << 32) | episode)?;
        for _ in 0..share {
            obs_all.extend_from_slice(&obs.data);
            latents.push(env.latent().s.clone());
            distractors.push(env.distractor_state().x);
            env_labels.push(e);
            let a = agent.sample_actions(&obs.data, &mut policy_rng)?;
            let out = env.step(&a)?;
            obs = if out.done {
                episode += 1;
                env.reset(((e as u64) << 32) | episode)?.0
            } else {
                out.obs
            };
        }
    }
    let latent_target = match envs[0].spec().n_latent_classes() {
        Some(c) => LatentTarget::Classes(c),
        None => LatentTarget::Continuous(latents[0].len()),
    };
    let dim = agent.repr_dim();
    let obs_dim = agent.obs_dim();
    let mut features = Vec::with_capacity(n * dim);
    for chunk in obs_all.chunks(512 * obs_dim) {
        features.extend_from_slice(agent.encode(chunk)?.data());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, Stream::Probe, 1));
    let n_train = n * 4 / 5;
    let eval = idx.split_off(n_train);
    Ok(ProbeDataset {
        features,
        dim,
        latents,
        distractors,
        env_labels,
        n_envs: envs.len(),
        latent_target,
        train: idx,
        eval,
    })
}

enum Targets {
    Classes { labels: Vec<usize>, n: usize },
    Values { data: Vec<f64>, dim: usize },
}

impl Targets {
    fn width(&self) -> usize {
        match self {
            Targets::Classes { n, .. } => *n,
            Targets::Values { dim, .. } => *dim,
        }
    }

    fn loss(&self, tape: &mut Tape, pred: Var, rows: &[usize]) -> Result<Var> {
        match self {
            Targets::Classes { labels, .. } => {
                let logp = tape.log_softmax_rows(pred)?;
                let picks: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
                let ll = tape.pick(logp, &picks)?;
                let m = tape.mean(ll)?;
                Ok(tape.neg(m)?)
            }
            Targets::Values { data, dim } => {
                let y: Vec<f64> = rows
                    .iter()
                    .flat_map(|&r| data[r * dim..(r + 1) * dim].to_vec())
                    .collect();
                let y = tape.constant(Tensor::new(vec![rows.len(), *dim], y)?);
                let d = tape.sub(pred, y)?;
                let d = tape.square(d)?;
                // Mean over rows of the per-row squared error summed over dims.
                let s = tape.sum_cols(d)?;
                Ok(tape.mean(s)?)
            }
        }
    }
}

fn gather(features: &[f64], dim: usize, rows: &[usize]) -> Result<Tensor> {
    let data = rows
        .iter()
        .flat_map(|&r| features[r * dim..(r + 1) * dim].to_vec())
        .collect();
    Ok(Tensor::new(vec![rows.len(), dim], data)?)
}

/// Trains a `[dim, h, h, out]` probe and returns the lowest eval loss seen
/// at the evaluation checkpoints.
fn train_probe(ds: &ProbeDataset, targets: &Targets, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.eval.is_empty() {
        return Err(invalid("probe split has an empty side"));
    }
    let mut init = rng_for(seed, Stream::Probe, 2);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(
        &mut store,
        "probe",
        &[ds.dim, cfg.hidden, cfg.hidden, targets.width()],
        &mut init,
    )?;
    let mut opt = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
    let mut order = ds.train.clone();
    let mut shuffle = rng_for(seed, Stream::Probe, 3);
    let eval_x = gather(&ds.features, ds.dim, &ds.eval)?;
    let mut best = f64::INFINITY;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for rows in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(gather(&ds.features, ds.dim, rows)?);
            let pred = mlp.forward(&mut tape, &p, x)?;
            let loss = targets.loss(&mut tape, pred, rows)?;
            let g = tape.backward(loss)?;
            let grads = Grads::collect(&g, &p, &store);
            opt.step(&mut store, &grads)?;
        }
        if epoch % cfg.eval_every == 0 {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let x = tape.constant(eval_x.clone());
            let pred = mlp.forward(&mut tape, &p, x)?;
            let loss = targets.loss(&mut tape, pred, &ds.eval)?;
            best = best.min(tape.scalar(loss));
        }
    }
    Ok(best)
}

/// Best eval cross-entropy of predicting the environment label from the
/// features. Lower means more task-irrelevant information.
pub fn train_env_label_probe(ds: &ProbeDataset, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let mut seen = ds.env_labels.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(invalid("environment-label probe needs at least two labels"));
    }
    let targets = Targets::Classes {
        labels: ds.env_labels.clone(),
        n: ds.n_envs,
    };
    train_probe(ds, &targets, cfg, seed)
}

/// Best eval loss of predicting the latent state: cross-entropy for
/// discrete latents, squared error for continuous ones. Lower means more
/// task-relevant information.
pub fn train_latent_probe(ds: &ProbeDataset, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let targets = match ds.latent_target {
        LatentTarget::Classes(n) => Targets::Classes {
            labels: (0..ds.len()).map(|i| ds.latent_class(i)).collect(),
            n,
        },
        LatentTarget::Continuous(dim) => Targets::Values {
            data: ds.latents.concat(),
            dim,
        },
    };
    train_probe(ds, &targets, cfg, seed)
}

/// Results of both probes over several probe seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeScores {
    pub env_label_ce: Vec<f64>,
    pub latent_loss: Vec<f64>,
}

/// Runs both probes for probe seeds `0..cfg.seeds`.
pub fn run_probes(ds: &ProbeDataset, cfg: &ProbeConfig, base_seed: u64) -> Result<ProbeScores> {
    let mut scores = ProbeScores {
        env_label_ce: Vec::new(),
        latent_loss: Vec::new(),
    };
    for k in 0..cfg.seeds as u64 {
        let seed = crate::seeding::derive_seed(base_seed, Stream::Probe, 100 + k);
        scores.env_label_ce.push(train_env_label_probe(ds, cfg, seed)?);
        scores.latent_loss.push(train_latent_probe(ds, cfg, seed)?);
    }
    Ok(scores)
}
