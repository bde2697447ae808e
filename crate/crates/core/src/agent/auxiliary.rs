//! Auxiliary representation objectives and their heads.

use cresp_tensor::nn::Mlp;
use cresp_tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{AgentConfig, Objective, PredictorKind};
use super::predictor::{CfPredictor, MlpPredictor, TransformerPredictor};
use crate::error::Result;
use crate::spectral::{cf_targets, cf_targets_sum, combined_loss, CfTargets, OmegaBatch};

/// Heads owned by the auxiliary objective; absent heads are `None`.
#[derive(Clone, Debug, Default)]
pub struct AuxHeads {
    pub predictor: Option<CfPredictor>,
    /// Reward-sequence regression head (`T` outputs, or 1 for the sum).
    pub reward: Option<Mlp>,
    /// Bilinear contrastive weight `W: [repr, repr]`.
    pub contrast: Option<ParamId>,
    /// Diagonal-Gaussian latent dynamics `(z, a) -> (μ, log σ)`.
    pub dynamics: Option<Mlp>,
}

/// Bounds on the dynamics model's log standard deviation.
pub const DYN_LOG_STD: (f64, f64) = (-5.0, 2.0);

impl AuxHeads {
    pub fn new(
        store: &mut ParamStore,
        cfg: &AgentConfig,
        repr: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let t = cfg.reward_length();
        let pc = &cfg.predictor;
        let h = pc.hidden_dim;
        let mut heads = AuxHeads::default();
        let obj = cfg.objective;
        if obj.uses_cf() {
            let omega_dim = omega_dim(obj, t);
            heads.predictor = Some(match cfg.predictor_kind() {
                PredictorKind::Mlp => {
                    CfPredictor::Mlp(MlpPredictor::new(store, repr, t * action_dim, omega_dim, h, rng)?)
                }
                PredictorKind::Transformer => CfPredictor::Transformer(TransformerPredictor::new(
                    store,
                    repr,
                    t,
                    action_dim,
                    omega_dim,
                    pc.model_dim,
                    pc.n_blocks,
                    pc.n_heads,
                    pc.dropout,
                    rng,
                )?),
            });
        }
        if matches!(
            obj,
            Objective::Rsp | Objective::RspSum | Objective::Rdp | Objective::RdpBm
        ) {
            let out = if obj == Objective::RspSum { 1 } else { t };
            heads.reward = Some(Mlp::new(store, "aux.reward", &[repr + t * action_dim, h, h, out], rng)?);
        }
        if matches!(obj, Objective::Tdp | Objective::Rdp | Objective::RdpBm) {
            let w: Vec<f64> = (0..repr * repr).map(|_| 0.01 * rng.random_range(-1.0..1.0)).collect();
            heads.contrast = Some(store.add("aux.contrast", Tensor::new(vec![repr, repr], w)?)?);
        }
        if obj == Objective::RdpBm {
            heads.dynamics = Some(Mlp::new(store, "aux.dynamics", &[repr + action_dim, h, 2 * repr], rng)?);
        }
        Ok(heads)
    }
}

/// Frequency width the predictor of `objective` expects at horizon `t`.
pub fn omega_dim(objective: Objective, t: usize) -> usize {
    if objective == Objective::CrespSum {
        1
    } else {
        t
    }
}

/// CF targets of `rewards` (`batch × t`) for `objective`: the whole
/// sequence for CRESP and CRESP-T, its discounted sum for CRESP-Sum.
pub fn objective_cf_targets(
    objective: Objective,
    omegas: &OmegaBatch,
    rewards: &[f64],
    t: usize,
    gamma: f64,
) -> Result<CfTargets> {
    if objective == Objective::CrespSum {
        cf_targets_sum(omegas, rewards, t, gamma)
    } else {
        cf_targets(omegas, rewards, t, gamma)
    }
}

/// Characteristic-function loss `wse + λ·scs` of the predictor outputs.
#[allow(clippy::too_many_arguments)]
pub fn cf_loss(
    tape: &mut Tape,
    predictor: &CfPredictor,
    p: &Bound,
    z: Var,
    actions: Var,
    omegas: Tensor,
    targets: &CfTargets,
    lambda: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let om = tape.constant(omegas);
    let (pc, ps) = predictor.forward(tape, p, z, actions, om, dropout_rng)?;
    combined_loss(tape, pc, ps, targets, lambda)
}

/// InfoNCE with bilinear scores `z_i W k_jᵀ`; the positive for row `i` is
/// key `i`.
pub fn contrastive_loss(tape: &mut Tape, w: Var, anchors: Var, keys: Var) -> Result<Var> {
    let proj = tape.matmul(anchors, w)?;
    let logits = tape.matmul_nt(proj, keys)?;
    let logp = tape.log_softmax_rows(logits)?;
    let n = tape.shape(logp)[0];
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick(logp, &diag)?;
    let m = tape.mean(picked)?;
    Ok(tape.neg(m)?)
}

/// Mean and log-std of the latent dynamics model, each `[batch, repr]`.
pub fn dynamics_dist(tape: &mut Tape, head: &Mlp, p: &Bound, z: Var, action: Var) -> Result<(Var, Var)> {
    let x = tape.concat_cols(&[z, action])?;
    let out = head.forward(tape, p, x)?;
    let repr = tape.shape(out)[1] / 2;
    let mu = tape.slice_cols(out, 0, repr)?;
    let raw = tape.slice_cols(out, repr, 2 * repr)?;
    let t = tape.tanh(raw)?;
    let half = 0.5 * (DYN_LOG_STD.1 - DYN_LOG_STD.0);
    let t = tape.scale(t, half)?;
    let log_std = tape.add_scalar(t, DYN_LOG_STD.0 + half)?;
    Ok((mu, log_std))
}

/// Gaussian negative log-likelihood (without the constant) of `target`.
pub fn dynamics_nll(tape: &mut Tape, mu: Var, log_std: Var, target: Tensor) -> Result<Var> {
    let y = tape.constant(target);
    let d = tape.sub(y, mu)?;
    let neg = tape.neg(log_std)?;
    let inv_std = tape.exp(neg)?;
    let r = tape.mul(d, inv_std)?;
    let r2 = tape.square(r)?;
    let r2 = tape.scale(r2, 0.5)?;
    let l = tape.add(r2, log_std)?;
    Ok(tape.mean(l)?)
}

/// Bisimulation targets `|r̂_i − r̂_j| + γ·W2(N_i, N_j)` for pairs `(i, perm[i])`
/// with diagonal Gaussians given by `mu` and `std` (all `[batch, repr]`).
pub fn bisim_targets(reward_hat: &[f64], mu: &Tensor, std: &Tensor, perm: &[usize], gamma: f64) -> Tensor {
    let repr = mu.cols();
    let n = reward_hat.len();
    let (m, s) = (mu.data(), std.data());
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let j = perm[i];
            let mut w2 = 0.0;
            for k in 0..repr {
                let dm = m[i * repr + k] - m[j * repr + k];
                let ds = s[i * repr + k] - s[j * repr + k];
                w2 += dm * dm + ds * ds;
            }
            (reward_hat[i] - reward_hat[j]).abs() + gamma * w2.sqrt()
        })
        .collect();
    Tensor::new(vec![n, 1], t).expect("one target per row")
}

/// `mean((‖z_i − z_perm(i)‖₁ − target_i)²)`.
pub fn bisim_loss(tape: &mut Tape, z: Var, perm: &[usize], target: Tensor) -> Result<Var> {
    let zp = tape.gather_rows(z, perm)?;
    let d = tape.sub(z, zp)?;
    let d = tape.abs(d)?;
    let dist = tape.sum_cols(d)?;
    let y = tape.constant(target);
    let e = tape.sub(dist, y)?;
    let e = tape.square(e)?;
    Ok(tape.mean(e)?)
}
