//! Squashed-Gaussian actor, twin critics and their losses.

use cresp_tensor::nn::Mlp;
use cresp_tensor::{Bound, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;
/// Keeps `log(1 - tanh²)` finite at saturation.
const SQUASH_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Actor {
    net: Mlp,
    action_dim: usize,
    log_std_min: f64,
    log_std_max: f64,
}

/// Output of [`Actor::sample`].
#[derive(Clone, Copy, Debug)]
pub struct ActorSample {
    /// `[batch, action_dim]` in `(-1, 1)`.
    pub action: Var,
    /// `[batch, 1]` log density of `action`.
    pub log_prob: Var,
}

impl Actor {
    pub fn new(
        store: &mut ParamStore,
        repr_dim: usize,
        hidden: usize,
        action_dim: usize,
        log_std_bounds: (f64, f64),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let net = Mlp::new(store, "actor", &[repr_dim, hidden, hidden, 2 * action_dim], rng)?;
        Ok(Self {
            net,
            action_dim,
            log_std_min: log_std_bounds.0,
            log_std_max: log_std_bounds.1,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Mean and log standard deviation; the latter is squashed into the
    /// configured bounds.
    pub fn dist(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let out = self.net.forward(tape, p, z)?;
        let mean = tape.slice_cols(out, 0, self.action_dim)?;
        let raw = tape.slice_cols(out, self.action_dim, 2 * self.action_dim)?;
        let t = tape.tanh(raw)?;
        let half = 0.5 * (self.log_std_max - self.log_std_min);
        let t = tape.scale(t, half)?;
        let log_std = tape.add_scalar(t, self.log_std_min + half)?;
        Ok((mean, log_std))
    }

    /// Reparameterized sample `tanh(mean + std·noise)` with its log density,
    /// including the tanh change-of-variables term.
    pub fn sample(&self, tape: &mut Tape, p: &Bound, z: Var, noise: Tensor) -> Result<ActorSample> {
        let (mean, log_std) = self.dist(tape, p, z)?;
        let eps = tape.constant(noise);
        let std = tape.exp(log_std)?;
        let shift = tape.mul(std, eps)?;
        let u = tape.add(mean, shift)?;
        let action = tape.tanh(u)?;
        let eps2 = tape.square(eps)?;
        let eps2 = tape.scale(eps2, -0.5)?;
        let gauss = tape.sub(eps2, log_std)?;
        let gauss = tape.sum_cols(gauss)?;
        let gauss = tape.add_scalar(gauss, -0.5 * LOG_2PI * self.action_dim as f64)?;
        let a2 = tape.square(action)?;
        let one_minus = tape.neg(a2)?;
        let one_minus = tape.add_scalar(one_minus, 1.0 + SQUASH_EPS)?;
        let log_jac = tape.log(one_minus)?;
        let log_jac = tape.sum_cols(log_jac)?;
        let log_prob = tape.sub(gauss, log_jac)?;
        Ok(ActorSample { action, log_prob })
    }

    /// `tanh(mean)`.
    pub fn mean_action(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let (mean, _) = self.dist(tape, p, z)?;
        Ok(tape.tanh(mean)?)
    }
}

/// Standard normal noise for `batch` actions.
pub fn action_noise(batch: usize, action_dim: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..batch * action_dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![batch, action_dim], data).expect("sizes agree")
}

#[derive(Clone, Debug)]
pub struct Critic {
    q1: Mlp,
    q2: Mlp,
}

impl Critic {
    pub fn new(
        store: &mut ParamStore,
        repr_dim: usize,
        hidden: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let sizes = [repr_dim + action_dim, hidden, hidden, 1];
        let q1 = Mlp::new(store, "critic.q1", &sizes, rng)?;
        let q2 = Mlp::new(store, "critic.q2", &sizes, rng)?;
        Ok(Self { q1, q2 })
    }

    /// Both Q estimates, each `[batch, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, action: Var) -> Result<(Var, Var)> {
        let x = tape.concat_cols(&[z, action])?;
        let q1 = self.q1.forward(tape, p, x)?;
        let q2 = self.q2.forward(tape, p, x)?;
        Ok((q1, q2))
    }
}

/// `mean((Q1 - y)²) + mean((Q2 - y)²)` for representations `z`.
pub fn critic_loss(tape: &mut Tape, critic: &Critic, p: &Bound, z: Var, action: Var, target: Tensor) -> Result<Var> {
    let (q1, q2) = critic.forward(tape, p, z, action)?;
    let y = tape.constant(target);
    let d1 = tape.sub(q1, y)?;
    let d2 = tape.sub(q2, y)?;
    let l1 = tape.square(d1)?;
    let l1 = tape.mean(l1)?;
    let l2 = tape.square(d2)?;
    let l2 = tape.mean(l2)?;
    Ok(tape.add(l1, l2)?)
}

/// Soft Bellman targets `r + γ (min Q' − α log π)` given next-state values.
pub fn soft_targets(rewards: &[f64], q1: &[f64], q2: &[f64], log_prob: &[f64], alpha: f64, gamma: f64) -> Tensor {
    let y: Vec<f64> = rewards
        .iter()
        .zip(q1.iter().zip(q2))
        .zip(log_prob)
        .map(|((r, (a, b)), lp)| r + gamma * (a.min(*b) - alpha * lp))
        .collect();
    let n = y.len();
    Tensor::new(vec![n, 1], y).expect("one target per row")
}

/// `mean(α·log π − min(Q1, Q2))` with critic parameters bound as given.
pub fn actor_loss(
    tape: &mut Tape,
    critic: &Critic,
    critic_p: &Bound,
    z: Var,
    sample: ActorSample,
    alpha: f64,
) -> Result<Var> {
    let (q1, q2) = critic.forward(tape, critic_p, z, sample.action)?;
    let q = tape.minimum(q1, q2)?;
    let ent = tape.scale(sample.log_prob, alpha)?;
    let d = tape.sub(ent, q)?;
    Ok(tape.mean(d)?)
}

/// `mean(α · (−log π − target_entropy))` with `α = exp(log_alpha)` and the
/// log densities treated as constants.
pub fn alpha_loss(tape: &mut Tape, log_alpha: Var, log_prob: &[f64], target_entropy: f64) -> Result<Var> {
    let alpha = tape.exp(log_alpha)?;
    let mean_term = log_prob.iter().map(|lp| -lp - target_entropy).sum::<f64>() / log_prob.len() as f64;
    Ok(tape.scale(alpha, mean_term)?)
}
