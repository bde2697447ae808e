//! Environment families whose observations render a task-relevant latent
//! state and a task-irrelevant distractor into disjoint regions.
//!
//! All environments of a family share the latent dynamics and reward; they
//! differ only in the distractor process. Latent randomness comes from a
//! stream keyed by the family seed and episode number, distractor randomness
//! from a stream keyed by the environment's own distractor seed, so the
//! latent trajectory under a fixed action sequence is identical across the
//! family.

mod distractor;

pub use distractor::{DistractorProcess, DRIFT_SCALE, N_PATTERNS, PATTERN_STAY};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seeding::{derive_seed, rng_for, Stream};
use crate::tabular::{RandomSpec, TabularPOMDP};

/// Distractor half-width of unseen test environments.
pub const TEST_BETA: f64 = 0.5;
/// Largest number of training environments per family.
pub const MAX_TRAIN_ENVS: usize = 32;
/// Offset separating test distractor seeds from training ones.
const TEST_SEED_OFFSET: u64 = 1 << 32;
/// Reward noise values added with equal probability in the stochastic variant.
pub const REWARD_NOISE: [f64; 3] = [-0.1, 0.0, 0.1];

const POINTMASS_DIM: usize = 4;
const TABULAR_STATES: usize = 5;
const TABULAR_ACTIONS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Grid,
    Pointmass,
    Tabular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorKind {
    ColorDrift,
    PatternMarkov,
}

/// Static description of one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub family: FamilyKind,
    pub gamma: f64,
    pub distractor_kind: DistractorKind,
    /// Color drift half-width.
    pub beta: f64,
    pub episode_len: usize,
    pub reward_bound: f64,
    /// Family seed: latent dynamics, mixing and shared colors derive from it.
    pub seed: u64,
    pub stochastic_reward: bool,
    /// Side length of the grid family.
    pub grid_size: usize,
    pub env_id: usize,
    pub distractor_seed: u64,
}

impl EnvSpec {
    pub fn grid(seed: u64) -> Self {
        Self {
            family: FamilyKind::Grid,
            gamma: 0.99,
            distractor_kind: DistractorKind::ColorDrift,
            beta: 0.1,
            episode_len: 100,
            reward_bound: 1.0,
            seed,
            stochastic_reward: false,
            grid_size: 9,
            env_id: 0,
            distractor_seed: derive_seed(seed, Stream::Family, 1),
        }
    }

    /// Largest reward magnitude the latent model can emit.
    pub fn max_abs_reward(&self) -> f64 {
        let noise = if self.stochastic_reward { 0.1 } else { 0.0 };
        match self.family {
            FamilyKind::Grid | FamilyKind::Pointmass => 1.0 + noise,
            FamilyKind::Tabular => tabular_model(self).map(|m| m.reward_bound).unwrap_or(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta {} must be >= 0", self.beta)));
        }
        if self.episode_len == 0 {
            return Err(invalid("episode_len must be positive"));
        }
        if self.family == FamilyKind::Grid && self.grid_size < 3 {
            return Err(invalid("grid_size must be at least 3"));
        }
        if !(self.reward_bound > 0.0) || self.reward_bound < self.max_abs_reward() {
            return Err(invalid(format!(
                "reward_bound {} below the largest reward {}",
                self.reward_bound,
                self.max_abs_reward()
            )));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        match self.family {
            FamilyKind::Grid | FamilyKind::Pointmass => 2,
            FamilyKind::Tabular => 1,
        }
    }

    pub fn obs_shape(&self) -> Vec<usize> {
        match self.family {
            FamilyKind::Grid => vec![3, self.grid_size, self.grid_size],
            FamilyKind::Pointmass => vec![POINTMASS_DIM + POINTMASS_DIM],
            FamilyKind::Tabular => vec![TABULAR_STATES + self.n_colors().max(PATTERN_LEN_SMALL)],
        }
    }

    fn n_colors(&self) -> usize {
        match self.family {
            FamilyKind::Grid | FamilyKind::Tabular => 2,
            FamilyKind::Pointmass => POINTMASS_DIM,
        }
    }

    fn pattern_len(&self) -> usize {
        match self.family {
            FamilyKind::Grid => 2 * self.grid_size * self.grid_size,
            FamilyKind::Pointmass | FamilyKind::Tabular => PATTERN_LEN_SMALL,
        }
    }

    /// Number of distinct latent states when the latent space is finite.
    pub fn n_latent_classes(&self) -> Option<usize> {
        match self.family {
            FamilyKind::Grid => Some(self.grid_size * self.grid_size),
            FamilyKind::Tabular => Some(TABULAR_STATES),
            FamilyKind::Pointmass => None,
        }
    }
}

const PATTERN_LEN_SMALL: usize = 4;

/// Task-relevant state.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// Grid: `[row, col]`; pointmass: `[px, py, vx, vy]`; tabular: `[index]`.
    pub s: Vec<f64>,
}

/// Task-irrelevant state and the label of the environment producing it.
#[derive(Clone, Debug, PartialEq)]
pub struct DistractorState {
    /// Colors in `[0,1]` or a single pattern index.
    pub x: Vec<f64>,
    pub env_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Shared latent dynamics and reward.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentModel {
    Grid { size: usize, goal: (usize, usize) },
    Pointmass { goal: [f64; 2] },
    Tabular { model: TabularPOMDP },
}

fn tabular_model(spec: &EnvSpec) -> Result<TabularPOMDP> {
    let mut rng = rng_for(spec.seed, Stream::Family, 0);
    TabularPOMDP::random(
        &RandomSpec {
            n_states: TABULAR_STATES,
            n_actions: TABULAR_ACTIONS,
            n_rewards: 2,
            gamma: spec.gamma,
            n_profiles: 3,
            stochastic_rewards: spec.stochastic_reward,
        },
        &mut rng,
    )
}

/// Maps a continuous grid action to a move: stay when both components are
/// small, otherwise one cell along the dominant axis.
pub fn grid_move(a: &[f64]) -> (isize, isize) {
    let (ar, ac) = (a[0], a[1]);
    if ar.abs().max(ac.abs()) < 1.0 / 3.0 {
        (0, 0)
    } else if ar.abs() >= ac.abs() {
        (ar.signum() as isize, 0)
    } else {
        (0, ac.signum() as isize)
    }
}

/// Bins `a ∈ (-1, 1)` into one of `n` discrete actions.
pub fn discrete_action(a: f64, n: usize) -> usize {
    (((a + 1.0) * 0.5 * n as f64).floor().max(0.0) as usize).min(n - 1)
}

impl LatentModel {
    fn for_spec(spec: &EnvSpec) -> Result<Self> {
        Ok(match spec.family {
            FamilyKind::Grid => Self::Grid {
                size: spec.grid_size,
                goal: (spec.grid_size - 1, spec.grid_size - 1),
            },
            FamilyKind::Pointmass => Self::Pointmass { goal: [0.5, 0.5] },
            FamilyKind::Tabular => Self::Tabular {
                model: tabular_model(spec)?,
            },
        })
    }

    pub fn check(&self, s: &LatentState) -> Result<()> {
        let ok = match self {
            Self::Grid { size, .. } => {
                s.s.len() == 2
                    && s.s
                        .iter()
                        .all(|v| v.fract() == 0.0 && *v >= 0.0 && (*v as usize) < *size)
            }
            Self::Pointmass { .. } => s.s.len() == 4 && s.s.iter().all(|v| (-1.0..=1.0).contains(v)),
            Self::Tabular { model } => {
                s.s.len() == 1 && s.s[0].fract() == 0.0 && s.s[0] >= 0.0 && (s.s[0] as usize) < model.n_states
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("latent state {:?} out of bounds", s.s)))
        }
    }

    pub fn initial(&self, rng: &mut ChaCha8Rng) -> LatentState {
        match self {
            Self::Grid { size, goal } => {
                let n = size * size;
                let goal_idx = goal.0 * size + goal.1;
                let mut k = rng.random_range(0..n - 1);
                if k >= goal_idx {
                    k += 1;
                }
                LatentState {
                    s: vec![(k / size) as f64, (k % size) as f64],
                }
            }
            Self::Pointmass { .. } => LatentState {
                s: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, 0.0],
            },
            Self::Tabular { model } => LatentState {
                s: vec![rng.random_range(0..model.n_states) as f64],
            },
        }
    }

    /// One latent transition `(s, a) -> (s', r)` drawing only from `rng`.
    pub fn step(&self, s: &LatentState, a: &[f64], stochastic: bool, rng: &mut ChaCha8Rng) -> (LatentState, f64) {
        let (next, base) = match self {
            Self::Grid { size, goal } => {
                let (dr, dc) = grid_move(a);
                let r = (s.s[0] as isize + dr).clamp(0, *size as isize - 1) as usize;
                let c = (s.s[1] as isize + dc).clamp(0, *size as isize - 1) as usize;
                let reward = if (r, c) == *goal { 1.0 } else { 0.0 };
                (
                    LatentState {
                        s: vec![r as f64, c as f64],
                    },
                    reward,
                )
            }
            Self::Pointmass { goal } => {
                let mut n = s.s.clone();
                for i in 0..2 {
                    let u = a[i].clamp(-1.0, 1.0);
                    let mut v = (0.9 * s.s[2 + i] + 0.3 * u).clamp(-1.0, 1.0);
                    let mut p = s.s[i] + 0.1 * v;
                    if !(-1.0..=1.0).contains(&p) {
                        p = p.clamp(-1.0, 1.0);
                        v = 0.0;
                    }
                    n[i] = p;
                    n[2 + i] = v;
                }
                let d = ((n[0] - goal[0]).powi(2) + (n[1] - goal[1]).powi(2)).sqrt();
                (LatentState { s: n }, 1.0 - d.min(1.0))
            }
            Self::Tabular { model } => {
                let st = s.s[0] as usize;
                let act = discrete_action(a[0], model.n_actions);
                let r = model.sample_reward(st, act, rng);
                let next = model.sample_next(st, act, rng);
                return (LatentState { s: vec![next as f64] }, r);
            }
        };
        let noise = if stochastic {
            REWARD_NOISE[rng.random_range(0..REWARD_NOISE.len())]
        } else {
            0.0
        };
        (next, base + noise)
    }
}

/// Fixed signed permutation with power-of-two scales; exactly invertible in
/// floating point.
#[derive(Clone, Debug, PartialEq)]
struct Mixing {
    perm: Vec<usize>,
    scale: Vec<f64>,
}

impl Mixing {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        let choices = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let scale = (0..dim).map(|_| choices[rng.random_range(0..choices.len())]).collect();
        Self { perm, scale }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().zip(&self.scale).map(|(&p, &c)| c * v[p]).collect()
    }

    fn invert(&self, y: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; y.len()];
        for (i, (&p, &c)) in self.perm.iter().zip(&self.scale).enumerate() {
            v[p] = y[i] / c;
        }
        v
    }
}

/// Pure rendering and decoding for one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Renderer {
    spec: EnvSpec,
    latent: LatentModel,
    distractor: DistractorProcess,
    mixing: Option<(Mixing, Mixing)>,
}

impl Renderer {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        spec.validate()?;
        let latent = LatentModel::for_spec(spec)?;
        let mut family_rng = rng_for(spec.seed, Stream::Family, 2);
        let mixing = (spec.family == FamilyKind::Pointmass).then(|| {
            let a = Mixing::random(POINTMASS_DIM, &mut family_rng);
            let b = Mixing::random(POINTMASS_DIM, &mut family_rng);
            (a, b)
        });
        let distractor = match spec.distractor_kind {
            DistractorKind::ColorDrift => {
                // The undistorted color is shared by the whole family.
                let base = (0..spec.n_colors())
                    .map(|_| family_rng.random_range(0.3..0.7))
                    .collect();
                DistractorProcess::Color { base, beta: spec.beta }
            }
            DistractorKind::PatternMarkov => {
                let mut rng = rng_for(spec.distractor_seed, Stream::Family, 3);
                DistractorProcess::random_patterns(spec.pattern_len(), &mut rng)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            latent,
            distractor,
            mixing,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn latent_model(&self) -> &LatentModel {
        &self.latent
    }

    pub fn distractor_process(&self) -> &DistractorProcess {
        &self.distractor
    }

    /// Width of the distractor feature block in tabular observations.
    fn tabular_feature_width(&self) -> usize {
        self.spec.n_colors().max(PATTERN_LEN_SMALL)
    }

    /// Renders `g(s, x)`.
    pub fn render(&self, s: &LatentState, x: &DistractorState) -> Result<Observation> {
        self.latent.check(s)?;
        self.distractor.check(&x.x)?;
        let feat = self.distractor.features(&x.x);
        let shape = self.spec.obs_shape();
        let data = match &self.latent {
            LatentModel::Grid { size, .. } => {
                let plane = size * size;
                let mut d = vec![0.0; 3 * plane];
                d[s.s[0] as usize * size + s.s[1] as usize] = 1.0;
                match self.spec.distractor_kind {
                    DistractorKind::ColorDrift => {
                        d[plane..2 * plane].iter_mut().for_each(|v| *v = feat[0]);
                        d[2 * plane..].iter_mut().for_each(|v| *v = feat[1]);
                    }
                    DistractorKind::PatternMarkov => d[plane..].copy_from_slice(&feat),
                }
                d
            }
            LatentModel::Pointmass { .. } => {
                let (ml, md) = self.mixing.as_ref().expect("pointmass has a mixing");
                let mut d = ml.apply(&s.s);
                d.extend(md.apply(&feat));
                d
            }
            LatentModel::Tabular { model } => {
                let mut d = vec![0.0; model.n_states + self.tabular_feature_width()];
                d[s.s[0] as usize] = 1.0;
                d[model.n_states..model.n_states + feat.len()].copy_from_slice(&feat);
                d
            }
        };
        Ok(Observation { shape, data })
    }

    /// Recovers `(s, x)` from an observation rendered under this spec.
    pub fn invert(&self, o: &Observation) -> Result<(LatentState, DistractorState)> {
        if o.shape != self.spec.obs_shape() || o.data.len() != o.shape.iter().product::<usize>() {
            return Err(Error::Decode(format!(
                "shape {:?} does not match {:?}",
                o.shape,
                self.spec.obs_shape()
            )));
        }
        let (s, feat) = match &self.latent {
            LatentModel::Grid { size, .. } => {
                let plane = size * size;
                let cell = one_hot_index(&o.data[..plane])?;
                let feat = match self.spec.distractor_kind {
                    DistractorKind::ColorDrift => {
                        vec![
                            constant_value(&o.data[plane..2 * plane])?,
                            constant_value(&o.data[2 * plane..])?,
                        ]
                    }
                    DistractorKind::PatternMarkov => o.data[plane..].to_vec(),
                };
                (vec![(cell / size) as f64, (cell % size) as f64], feat)
            }
            LatentModel::Pointmass { .. } => {
                let (ml, md) = self.mixing.as_ref().expect("pointmass has a mixing");
                let s = ml.invert(&o.data[..POINTMASS_DIM]);
                let feat = md.invert(&o.data[POINTMASS_DIM..]);
                let feat = match self.spec.distractor_kind {
                    DistractorKind::ColorDrift => feat[..self.spec.n_colors()].to_vec(),
                    DistractorKind::PatternMarkov => feat,
                };
                (s, feat)
            }
            LatentModel::Tabular { model } => {
                let cell = one_hot_index(&o.data[..model.n_states])?;
                let rest = &o.data[model.n_states..];
                let feat = match self.spec.distractor_kind {
                    DistractorKind::ColorDrift => {
                        let n = self.spec.n_colors();
                        if rest[n..].iter().any(|v| *v != 0.0) {
                            return Err(Error::Decode("nonzero padding after colors".into()));
                        }
                        rest[..n].to_vec()
                    }
                    DistractorKind::PatternMarkov => rest.to_vec(),
                };
                (vec![cell as f64], feat)
            }
        };
        let s = LatentState { s };
        self.latent.check(&s).map_err(|e| Error::Decode(e.to_string()))?;
        let x = self.distractor.decode(&feat)?;
        Ok((
            s,
            DistractorState {
                x,
                env_id: self.spec.env_id,
            },
        ))
    }

    /// Indices of observation entries that encode the latent state.
    pub fn latent_region(&self) -> std::ops::Range<usize> {
        match &self.latent {
            LatentModel::Grid { size, .. } => 0..size * size,
            LatentModel::Pointmass { .. } => 0..POINTMASS_DIM,
            LatentModel::Tabular { model } => 0..model.n_states,
        }
    }
}

/// Renders `g(s, x)` under `spec`.
pub fn render_observation(s: &LatentState, x: &DistractorState, spec: &EnvSpec) -> Result<Observation> {
    Renderer::new(spec)?.render(s, x)
}

/// Decodes an observation rendered under `spec` back into `(s, x)`.
pub fn invert_observation(o: &Observation, spec: &EnvSpec) -> Result<(LatentState, DistractorState)> {
    Renderer::new(spec)?.invert(o)
}

fn one_hot_index(v: &[f64]) -> Result<usize> {
    let mut hit = None;
    for (i, &x) in v.iter().enumerate() {
        if x == 1.0 {
            if hit.is_some() {
                return Err(Error::Decode("latent region has more than one active cell".into()));
            }
            hit = Some(i);
        } else if x != 0.0 {
            return Err(Error::Decode(format!("latent region holds non-binary value {x}")));
        }
    }
    hit.ok_or_else(|| Error::Decode("latent region has no active cell".into()))
}

fn constant_value(v: &[f64]) -> Result<f64> {
    let c = v[0];
    if v.iter().any(|&x| x != c) {
        return Err(Error::Decode("color channel is not uniform".into()));
    }
    Ok(c)
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

/// A stateful environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    renderer: Renderer,
    latent: LatentState,
    x: Vec<f64>,
    t: usize,
    done: bool,
    started: bool,
    latent_rng: ChaCha8Rng,
    distractor_rng: ChaCha8Rng,
}

impl Env {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        let renderer = Renderer::new(spec)?;
        Ok(Self {
            renderer,
            latent: LatentState { s: Vec::new() },
            x: Vec::new(),
            t: 0,
            done: false,
            started: false,
            latent_rng: rng_for(spec.seed, Stream::EnvLatent, 0),
            distractor_rng: rng_for(spec.distractor_seed, Stream::EnvDistractor, 0),
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        self.renderer.spec()
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    pub fn env_id(&self) -> usize {
        self.renderer.spec.env_id
    }

    /// Starts episode `episode_seed`; returns the observation and, for
    /// diagnostics only, the generating latent and distractor states.
    pub fn reset(&mut self, episode_seed: u64) -> Result<(Observation, LatentState, DistractorState)> {
        let spec = &self.renderer.spec;
        self.latent_rng = rng_for(spec.seed, Stream::EnvLatent, episode_seed);
        self.distractor_rng = rng_for(spec.distractor_seed, Stream::EnvDistractor, episode_seed);
        self.latent = self.renderer.latent.initial(&mut self.latent_rng);
        self.x = self.renderer.distractor.init(&mut self.distractor_rng);
        self.t = 0;
        self.done = false;
        self.started = true;
        let xs = self.distractor_state();
        let obs = self.renderer.render(&self.latent, &xs)?;
        Ok((obs, self.latent.clone(), xs))
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if !self.started {
            return Err(Error::EnvState("step called before reset".into()));
        }
        if self.done {
            return Err(Error::EnvState("step called after the episode ended".into()));
        }
        if action.len() != self.renderer.spec.action_dim() || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::EnvState(format!("bad action {action:?}")));
        }
        let (next, reward) = self.renderer.latent.step(
            &self.latent,
            action,
            self.renderer.spec.stochastic_reward,
            &mut self.latent_rng,
        );
        self.latent = next;
        self.x = self.renderer.distractor.step(&self.x, &mut self.distractor_rng);
        self.t += 1;
        self.done = self.t >= self.renderer.spec.episode_len;
        let obs = self.renderer.render(&self.latent, &self.distractor_state())?;
        Ok(StepOutcome {
            obs,
            reward,
            done: self.done,
        })
    }

    pub fn latent(&self) -> &LatentState {
        &self.latent
    }

    pub fn distractor_state(&self) -> DistractorState {
        DistractorState {
            x: self.x.clone(),
            env_id: self.renderer.spec.env_id,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

/// Training and held-out environments of one family.
pub fn spawn_family(base: &EnvSpec, n_train: usize, n_test: usize) -> Result<(Vec<Env>, Vec<Env>)> {
    if n_train == 0 || n_test == 0 {
        return Err(invalid("a family needs at least one training and one test environment"));
    }
    if n_train > MAX_TRAIN_ENVS {
        return Err(invalid(format!(
            "{n_train} training environments requested; only {MAX_TRAIN_ENVS} disjoint distractor configurations exist"
        )));
    }
    let mut train = Vec::with_capacity(n_train);
    for j in 0..n_train {
        let mut spec = base.clone();
        spec.env_id = j;
        spec.distractor_seed = derive_seed(base.seed, Stream::Family, 1 + j as u64);
        if base.distractor_kind == DistractorKind::ColorDrift {
            spec.beta = train_beta(j, n_train);
        }
        train.push(Env::new(&spec)?);
    }
    let mut test = Vec::with_capacity(n_test);
    for j in 0..n_test {
        let mut spec = base.clone();
        spec.env_id = n_train + j;
        spec.distractor_seed = derive_seed(base.seed, Stream::Family, TEST_SEED_OFFSET + j as u64);
        if base.distractor_kind == DistractorKind::ColorDrift {
            spec.beta = TEST_BETA;
        }
        test.push(Env::new(&spec)?);
    }
    Ok((train, test))
}

/// Training half-widths evenly spaced over `[0.1, 0.2]`; a single
/// environment uses 0.1.
pub fn train_beta(j: usize, n: usize) -> f64 {
    if n == 1 {
        0.1
    } else {
        0.1 + 0.1 * j as f64 / (n - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn betas_follow_even_spacing() {
        let b: Vec<f64> = (0..3).map(|j| train_beta(j, 3)).collect();
        assert!((b[0] - 0.1).abs() < 1e-15 && (b[1] - 0.15).abs() < 1e-15 && (b[2] - 0.2).abs() < 1e-15);
        assert_eq!(train_beta(0, 1), 0.1);
    }

    #[test]
    fn grid_moves() {
        assert_eq!(grid_move(&[0.1, -0.2]), (0, 0));
        assert_eq!(grid_move(&[0.9, -0.2]), (1, 0));
        assert_eq!(grid_move(&[0.1, -0.5]), (0, -1));
    }

    #[test]
    fn discrete_bins() {
        assert_eq!(discrete_action(-0.999, 2), 0);
        assert_eq!(discrete_action(0.001, 2), 1);
        assert_eq!(discrete_action(1.0, 3), 2);
    }

    #[test]
    fn step_before_reset_or_after_done_fails() {
        let mut spec = EnvSpec::grid(0);
        spec.episode_len = 2;
        let mut env = Env::new(&spec).unwrap();
        assert!(env.step(&[0.0, 0.0]).is_err());
        env.reset(0).unwrap();
        env.step(&[0.0, 0.0]).unwrap();
        assert!(env.step(&[0.0, 0.0]).unwrap().done);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::EnvState(_))));
    }
}
