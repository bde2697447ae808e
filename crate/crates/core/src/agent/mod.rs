//! SAC agent with a shared observation encoder and a pluggable auxiliary
//! representation objective.
//!
//! The encoder is trained by the critic loss and the auxiliary loss. The
//! actor reads detached representations, so its loss never reaches the
//! encoder. Target copies of the encoder and critic follow by Polyak
//! averaging.

pub mod augment;
pub mod auxiliary;
pub mod config;
pub mod encoder;
pub mod predictor;
pub mod sac;
pub mod train;

use std::path::Path;

use cresp_tensor::{
    finite_diff_check, Adam, AdamConfig, Bound, GradCheckReport, Grads, ParamId, ParamStore, Tape, Tensor, TensorError,
    Var,
};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, SegmentBatch, TransitionBatch};
use crate::seeding::{rng_for, Stream};
use crate::spectral::{discounted_sum, OmegaBatch};

pub use config::{AgentConfig, EncoderConfig, EncoderKind, Objective, PredictorConfig, PredictorKind, SacConfig};

use auxiliary::AuxHeads;
use encoder::Encoder;
use sac::{Actor, Critic};

/// Losses and diagnostics from one SAC update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SacStats {
    pub critic_loss: f64,
    /// Encoder gradient norm from the critic loss.
    pub critic_encoder_grad_norm: f64,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
    /// Gradient norm that the actor loss sent to the encoder; always zero.
    pub actor_encoder_grad_norm: f64,
}

/// Per-stream generators owned by the agent.
#[derive(Clone, Debug)]
struct AgentRngs {
    omega: ChaCha8Rng,
    dropout: ChaCha8Rng,
    augment: ChaCha8Rng,
    action_noise: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct Agent {
    cfg: AgentConfig,
    obs_shape: Vec<usize>,
    action_dim: usize,
    horizon: usize,
    encoder: Encoder,
    enc: ParamStore,
    enc_target: ParamStore,
    actor: Actor,
    actor_p: ParamStore,
    critic: Critic,
    critic_p: ParamStore,
    critic_target: ParamStore,
    log_alpha: ParamStore,
    log_alpha_id: ParamId,
    aux: AuxHeads,
    aux_p: ParamStore,
    opt_enc_critic: Adam,
    opt_critic: Adam,
    opt_actor: Adam,
    opt_alpha: Adam,
    opt_enc_aux: Adam,
    opt_aux: Adam,
    rngs: AgentRngs,
    updates: u64,
}

fn batch_tensor(data: &[f64], rows: usize) -> Result<Tensor> {
    let cols = if rows == 0 { 0 } else { data.len() / rows };
    Ok(Tensor::new(vec![rows, cols], data.to_vec())?)
}

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Format(other.to_string()),
    }
}

/// Random inputs of one auxiliary update.
struct AuxDraws {
    obs: Vec<f64>,
    omegas: Option<OmegaBatch>,
    obs_end: Option<Vec<f64>>,
    next_obs: Option<Vec<f64>>,
    perm: Option<Vec<usize>>,
}

/// Borrowed pieces needed to build the auxiliary loss graph.
struct AuxGraph<'a> {
    cfg: &'a AgentConfig,
    encoder: &'a Encoder,
    heads: &'a AuxHeads,
    enc_target: &'a ParamStore,
    action_dim: usize,
}

impl AuxGraph<'_> {
    /// Sum of every auxiliary term, plus the bisimulation target used (when
    /// the objective has one). A given `bisim_target` replaces the one
    /// derived from the current reward and dynamics heads.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &self,
        tape: &mut Tape,
        pe: &Bound,
        px: &Bound,
        seg: &SegmentBatch,
        draws: &AuxDraws,
        dropout: Option<&mut ChaCha8Rng>,
        bisim_target: Option<&Tensor>,
    ) -> Result<(Var, Option<Tensor>)> {
        let obj = self.cfg.objective;
        let n = seg.batch;
        let t = seg.horizon;
        let gamma = self.cfg.sac.gamma;
        let x = tape.constant(batch_tensor(&draws.obs, n)?);
        let z = self.encoder.forward(tape, pe, x)?;
        let actions = tape.constant(batch_tensor(&seg.actions, n)?);
        let mut terms = Vec::new();

        if let (Some(pred), Some(omegas)) = (&self.heads.predictor, &draws.omegas) {
            let pc = &self.cfg.predictor;
            let targets = auxiliary::objective_cf_targets(obj, omegas, &seg.rewards, t, gamma)?;
            let loss = auxiliary::cf_loss(
                tape,
                pred,
                px,
                z,
                actions,
                omegas.to_tensor(),
                &targets,
                pc.lambda,
                dropout,
            )?;
            terms.push(loss);
        }

        let mut reward_hat = None;
        if let Some(head) = &self.heads.reward {
            let target = if obj == Objective::RspSum {
                let sums: Vec<f64> = seg.rewards.chunks_exact(t).map(|r| discounted_sum(r, gamma)).collect();
                Tensor::new(vec![n, 1], sums)?
            } else {
                Tensor::new(vec![n, t], seg.rewards.clone())?
            };
            let xa = tape.concat_cols(&[z, actions])?;
            let pred = head.forward(tape, px, xa)?;
            let v = tape.value(pred);
            let cols = v.cols();
            reward_hat = Some(v.data().iter().step_by(cols).copied().collect::<Vec<f64>>());
            let y = tape.constant(target);
            let d = tape.sub(pred, y)?;
            let d = tape.square(d)?;
            terms.push(tape.mean(d)?);
        }

        if let (Some(w), Some(end)) = (self.heads.contrast, &draws.obs_end) {
            let pet = self.enc_target.bind_frozen(tape);
            let xe = tape.constant(batch_tensor(end, n)?);
            let keys = self.encoder.forward(tape, &pet, xe)?;
            terms.push(auxiliary::contrastive_loss(tape, px.var(w), z, keys)?);
        }

        let mut used_bisim = None;
        if let (Some(head), Some(next), Some(perm)) = (&self.heads.dynamics, &draws.next_obs, &draws.perm) {
            let pet = self.enc_target.bind_frozen(tape);
            let xn = tape.constant(batch_tensor(next, n)?);
            let zn = self.encoder.forward(tape, &pet, xn)?;
            let z_next = tape.value(zn).clone();
            let first: Vec<f64> = seg
                .actions
                .chunks_exact(t * self.action_dim)
                .flat_map(|c| c[..self.action_dim].to_vec())
                .collect();
            let a1 = tape.constant(Tensor::new(vec![n, self.action_dim], first)?);
            let (mu, log_std) = auxiliary::dynamics_dist(tape, head, px, z, a1)?;
            terms.push(auxiliary::dynamics_nll(tape, mu, log_std, z_next)?);

            let target = match bisim_target {
                Some(t) => t.clone(),
                None => {
                    let mu_v = tape.value(mu).clone();
                    let std_v = tape.value(log_std).map(f64::exp);
                    let r_hat = reward_hat
                        .as_deref()
                        .expect("bisimulation objective carries a reward head");
                    auxiliary::bisim_targets(r_hat, &mu_v, &std_v, perm, gamma)
                }
            };
            terms.push(auxiliary::bisim_loss(tape, z, perm, target.clone())?);
            used_bisim = Some(target);
        }

        let mut loss = terms[0];
        for &term in &terms[1..] {
            loss = tape.add(loss, term)?;
        }
        Ok((loss, used_bisim))
    }
}

impl Agent {
    pub fn new(cfg: AgentConfig, obs_shape: &[usize], action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng_for(seed, Stream::AgentInit, 0);
        let mut enc = ParamStore::new();
        let encoder = Encoder::new(&mut enc, &cfg.encoder, obs_shape, &mut init)?;
        let repr = encoder.repr_dim();
        let sc = &cfg.sac;
        let mut actor_p = ParamStore::new();
        let actor = Actor::new(
            &mut actor_p,
            repr,
            sc.hidden_dim,
            action_dim,
            (sc.log_std_min, sc.log_std_max),
            &mut init,
        )?;
        let mut critic_p = ParamStore::new();
        let critic = Critic::new(&mut critic_p, repr, sc.hidden_dim, action_dim, &mut init)?;
        let mut log_alpha = ParamStore::new();
        let log_alpha_id = log_alpha.add("log_alpha", Tensor::new(vec![1], vec![sc.init_temperature.ln()])?)?;
        let mut aux_p = ParamStore::new();
        let aux = AuxHeads::new(&mut aux_p, &cfg, repr, action_dim, &mut init)?;
        let adam = |s: &ParamStore| Adam::new(s, AdamConfig::with_lr(sc.lr));
        let rngs = AgentRngs {
            omega: rng_for(seed, Stream::Omega, 0),
            dropout: rng_for(seed, Stream::Dropout, 0),
            augment: rng_for(seed, Stream::Augment, 0),
            action_noise: rng_for(seed, Stream::ActionNoise, 0),
        };
        Ok(Self {
            horizon: cfg.reward_length(),
            obs_shape: obs_shape.to_vec(),
            action_dim,
            opt_enc_critic: adam(&enc),
            opt_critic: adam(&critic_p),
            opt_actor: adam(&actor_p),
            opt_alpha: adam(&log_alpha),
            opt_enc_aux: adam(&enc),
            opt_aux: adam(&aux_p),
            enc_target: enc.clone(),
            critic_target: critic_p.clone(),
            encoder,
            enc,
            actor,
            actor_p,
            critic,
            critic_p,
            log_alpha,
            log_alpha_id,
            aux,
            aux_p,
            rngs,
            updates: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder.obs_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder.repr_dim()
    }

    /// Segment length the auxiliary objective trains on.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.get(self.log_alpha_id).data()[0].exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn encoder_params(&self) -> &ParamStore {
        &self.enc
    }

    pub fn encoder_target_params(&self) -> &ParamStore {
        &self.enc_target
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.critic_p
    }

    pub fn critic_target_params(&self) -> &ParamStore {
        &self.critic_target
    }

    pub fn actor_params(&self) -> &ParamStore {
        &self.actor_p
    }

    pub fn aux_params(&self) -> &ParamStore {
        &self.aux_p
    }

    /// Fingerprint over every parameter store, for determinism checks.
    pub fn fingerprint(&self) -> u64 {
        [
            &self.enc,
            &self.enc_target,
            &self.actor_p,
            &self.critic_p,
            &self.critic_target,
            &self.log_alpha,
            &self.aux_p,
        ]
        .iter()
        .fold(0u64, |h, s| crate::seeding::mix(h ^ s.fingerprint()))
    }

    fn image_shape(&self) -> Option<[usize; 3]> {
        match self.obs_shape[..] {
            [c, h, w] => Some([c, h, w]),
            _ => None,
        }
    }

    fn augment(&mut self, data: &[f64]) -> Vec<f64> {
        match self.image_shape() {
            Some(shape) if self.cfg.augment && self.cfg.shift_pad > 0 => {
                augment::random_shift(data, shape, self.cfg.shift_pad, &mut self.rngs.augment)
            }
            _ => data.to_vec(),
        }
    }

    fn check_obs(&self, obs: &[f64]) -> Result<usize> {
        let d = self.obs_dim();
        if obs.is_empty() || !obs.len().is_multiple_of(d) {
            return Err(Error::Length {
                what: "observation batch vs obs_dim",
                left: obs.len(),
                right: d,
            });
        }
        Ok(obs.len() / d)
    }

    /// Representations of a batch of observations (no augmentation).
    pub fn encode(&self, obs: &[f64]) -> Result<Tensor> {
        let n = self.check_obs(obs)?;
        let mut tape = Tape::new();
        let p = self.enc.bind_frozen(&mut tape);
        let x = tape.constant(batch_tensor(obs, n)?);
        let z = self.encoder.forward(&mut tape, &p, x)?;
        Ok(tape.value(z).clone())
    }

    /// Actions for a batch of observations: `tanh(mean)` when
    /// `deterministic`, otherwise a policy sample.
    pub fn act(&mut self, obs: &[f64], deterministic: bool) -> Result<Vec<f64>> {
        let n = self.check_obs(obs)?;
        let noise = (!deterministic).then(|| sac::action_noise(n, self.action_dim, &mut self.rngs.action_noise));
        self.policy(obs, n, noise)
    }

    /// Policy samples drawn with an external generator; leaves the agent
    /// untouched.
    pub fn sample_actions(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = self.check_obs(obs)?;
        self.policy(obs, n, Some(sac::action_noise(n, self.action_dim, rng)))
    }

    fn policy(&self, obs: &[f64], n: usize, noise: Option<Tensor>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pe = self.enc.bind_frozen(&mut tape);
        let pa = self.actor_p.bind_frozen(&mut tape);
        let x = tape.constant(batch_tensor(obs, n)?);
        let z = self.encoder.forward(&mut tape, &pe, x)?;
        let a = match noise {
            None => self.actor.mean_action(&mut tape, &pa, z)?,
            Some(noise) => self.actor.sample(&mut tape, &pa, z, noise)?.action,
        };
        Ok(tape.value(a).data().to_vec())
    }

    /// One critic update, then (on schedule) actor and temperature updates
    /// and the Polyak target updates.
    pub fn update_sac(&mut self, batch: &TransitionBatch) -> Result<SacStats> {
        let n = batch.batch;
        let obs = self.augment(&batch.obs);
        let next_obs = self.augment(&batch.next_obs);
        let alpha = self.alpha();

        let target = self.critic_target(&next_obs, &batch.rewards, n)?;

        let (critic_loss, critic_enc_norm) = {
            let mut tape = Tape::new();
            let pe = self.enc.bind(&mut tape);
            let pc = self.critic_p.bind(&mut tape);
            let x = tape.constant(batch_tensor(&obs, n)?);
            let z = self.encoder.forward(&mut tape, &pe, x)?;
            let a = tape.constant(batch_tensor(&batch.actions, n)?);
            let loss = sac::critic_loss(&mut tape, &self.critic, &pc, z, a, target)?;
            let g = tape.backward(loss)?;
            let grads = Grads::collect(&g, &pe, &self.enc);
            let norm = grads.norm();
            self.opt_enc_critic.step(&mut self.enc, &grads)?;
            let grads = Grads::collect(&g, &pc, &self.critic_p);
            self.opt_critic.step(&mut self.critic_p, &grads)?;
            (tape.scalar(loss), norm)
        };

        self.updates += 1;
        let mut stats = SacStats {
            critic_loss,
            critic_encoder_grad_norm: critic_enc_norm,
            alpha,
            ..SacStats::default()
        };
        if self.updates.is_multiple_of(self.cfg.sac.actor_update_freq as u64) {
            let (actor_loss, enc_norm) = self.update_actor_and_alpha(&obs, n)?;
            stats.actor_loss = Some(actor_loss);
            stats.actor_encoder_grad_norm = enc_norm;
            stats.alpha = self.alpha();
        }
        if self.updates.is_multiple_of(self.cfg.sac.critic_target_update_freq as u64) {
            self.soft_update_targets(self.cfg.sac.tau)?;
        }
        Ok(stats)
    }

    /// Soft Bellman targets for augmented next observations. Nothing on
    /// this tape is trained. Episodes end only at the time limit, so targets
    /// always bootstrap.
    fn critic_target(&mut self, next_obs: &[f64], rewards: &[f64], n: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pe = self.enc.bind_frozen(&mut tape);
        let pet = self.enc_target.bind_frozen(&mut tape);
        let pa = self.actor_p.bind_frozen(&mut tape);
        let pct = self.critic_target.bind_frozen(&mut tape);
        let x = tape.constant(batch_tensor(next_obs, n)?);
        let z_next = self.encoder.forward(&mut tape, &pe, x)?;
        let noise = sac::action_noise(n, self.action_dim, &mut self.rngs.action_noise);
        let s = self.actor.sample(&mut tape, &pa, z_next, noise)?;
        let zt = self.encoder.forward(&mut tape, &pet, x)?;
        let (q1, q2) = self.critic.forward(&mut tape, &pct, zt, s.action)?;
        Ok(sac::soft_targets(
            rewards,
            tape.value(q1).data(),
            tape.value(q2).data(),
            tape.value(s.log_prob).data(),
            self.alpha(),
            self.cfg.sac.gamma,
        ))
    }

    /// Returns the actor loss and the norm of the encoder gradient it produced.
    fn update_actor_and_alpha(&mut self, obs: &[f64], n: usize) -> Result<(f64, f64)> {
        let alpha = self.alpha();
        let mut tape = Tape::new();
        // The encoder is bound as trainable so that the detach is what keeps
        // its gradient at zero.
        let pe = self.enc.bind(&mut tape);
        let pa = self.actor_p.bind(&mut tape);
        let pc = self.critic_p.bind_frozen(&mut tape);
        let x = tape.constant(batch_tensor(obs, n)?);
        let z = self.encoder.forward(&mut tape, &pe, x)?;
        let z = tape.detach(z);
        let noise = sac::action_noise(n, self.action_dim, &mut self.rngs.action_noise);
        let s = self.actor.sample(&mut tape, &pa, z, noise)?;
        let loss = sac::actor_loss(&mut tape, &self.critic, &pc, z, s, alpha)?;
        let g = tape.backward(loss)?;
        let enc_norm = Grads::collect(&g, &pe, &self.enc).norm();
        let grads = Grads::collect(&g, &pa, &self.actor_p);
        self.opt_actor.step(&mut self.actor_p, &grads)?;
        let log_prob = tape.value(s.log_prob).data().to_vec();
        let actor_loss = tape.scalar(loss);

        let mut tape = Tape::new();
        let pl = self.log_alpha.bind(&mut tape);
        let target_entropy = -(self.action_dim as f64);
        let loss = sac::alpha_loss(&mut tape, pl.var(self.log_alpha_id), &log_prob, target_entropy)?;
        let g = tape.backward(loss)?;
        let grads = Grads::collect(&g, &pl, &self.log_alpha);
        self.opt_alpha.step(&mut self.log_alpha, &grads)?;
        Ok((actor_loss, enc_norm))
    }

    /// Polyak update of the encoder and critic targets.
    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        self.critic_target.soft_update(&self.critic_p, tau)?;
        self.enc_target.soft_update(&self.enc, tau)?;
        Ok(())
    }

    /// One auxiliary update; `None` for the objective without an auxiliary
    /// loss, in which case nothing changes.
    pub fn update_aux(&mut self, seg: &SegmentBatch) -> Result<Option<f64>> {
        if self.cfg.objective == Objective::None {
            return Ok(None);
        }
        self.check_horizon(seg)?;
        let draws = self.draw_aux(seg)?;
        let mut tape = Tape::new();
        let pe = self.enc.bind(&mut tape);
        let px = self.aux_p.bind(&mut tape);
        let graph = AuxGraph {
            cfg: &self.cfg,
            encoder: &self.encoder,
            heads: &self.aux,
            enc_target: &self.enc_target,
            action_dim: self.action_dim,
        };
        let (loss, _) = graph.build(&mut tape, &pe, &px, seg, &draws, Some(&mut self.rngs.dropout), None)?;
        let g = tape.backward(loss)?;
        let grads = Grads::collect(&g, &pe, &self.enc);
        self.opt_enc_aux.step(&mut self.enc, &grads)?;
        let grads = Grads::collect(&g, &px, &self.aux_p);
        self.opt_aux.step(&mut self.aux_p, &grads)?;
        Ok(Some(tape.scalar(loss)))
    }

    fn check_horizon(&self, seg: &SegmentBatch) -> Result<()> {
        if seg.horizon != self.horizon {
            return Err(Error::Length {
                what: "segment horizon vs reward length",
                left: seg.horizon,
                right: self.horizon,
            });
        }
        Ok(())
    }

    /// Every random draw of one auxiliary update, taken before the graph is
    /// built.
    fn draw_aux(&mut self, seg: &SegmentBatch) -> Result<AuxDraws> {
        let obj = self.cfg.objective;
        let obs = self.augment(&seg.obs);
        let omegas = self
            .aux
            .predictor
            .as_ref()
            .map(|_| {
                OmegaBatch::sample(
                    self.cfg.predictor.kappa,
                    auxiliary::omega_dim(obj, self.horizon),
                    &mut self.rngs.omega,
                )
            })
            .transpose()?;
        let obs_end = self.aux.contrast.map(|_| self.augment(&seg.obs_end));
        let (next_obs, perm) = match self.aux.dynamics {
            Some(_) => {
                let next = self.augment(&seg.next_obs);
                let mut perm: Vec<usize> = (0..seg.batch).collect();
                perm.shuffle(&mut self.rngs.omega);
                (Some(next), Some(perm))
            }
            None => (None, None),
        };
        Ok(AuxDraws {
            obs,
            omegas,
            obs_end,
            next_obs,
            perm,
        })
    }

    /// Central finite-difference check of the critic loss with respect to
    /// the encoder and critic parameters. The Bellman target is computed
    /// once and held fixed. Consumes augmentation and action-noise draws.
    pub fn critic_gradcheck(
        &mut self,
        batch: &TransitionBatch,
        eps: f64,
        max_coords: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GradCheckReport> {
        let n = batch.batch;
        let obs = self.augment(&batch.obs);
        let next_obs = self.augment(&batch.next_obs);
        let target = self.critic_target(&next_obs, &batch.rewards, n)?;
        let x = batch_tensor(&obs, n)?;
        let a = batch_tensor(&batch.actions, n)?;
        let (encoder, critic) = (&self.encoder, &self.critic);
        Ok(finite_diff_check(
            &mut [&mut self.enc, &mut self.critic_p],
            eps,
            max_coords,
            rng,
            |tape, b| {
                let x = tape.constant(x.clone());
                let z = encoder.forward(tape, &b[0], x).map_err(tensor_err)?;
                let a = tape.constant(a.clone());
                sac::critic_loss(tape, critic, &b[1], z, a, target.clone()).map_err(tensor_err)
            },
        )?)
    }

    /// Central finite-difference check of the whole auxiliary loss with
    /// respect to the encoder and auxiliary parameters, dropout off. The
    /// bisimulation target is computed once and held fixed. `None` for the
    /// objective without an auxiliary loss.
    pub fn aux_gradcheck(
        &mut self,
        seg: &SegmentBatch,
        eps: f64,
        max_coords: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<GradCheckReport>> {
        if self.cfg.objective == Objective::None {
            return Ok(None);
        }
        self.check_horizon(seg)?;
        let draws = self.draw_aux(seg)?;
        let graph = AuxGraph {
            cfg: &self.cfg,
            encoder: &self.encoder,
            heads: &self.aux,
            enc_target: &self.enc_target,
            action_dim: self.action_dim,
        };
        let bisim = {
            let mut tape = Tape::new();
            let pe = self.enc.bind_frozen(&mut tape);
            let px = self.aux_p.bind_frozen(&mut tape);
            graph.build(&mut tape, &pe, &px, seg, &draws, None, None)?.1
        };
        let report = finite_diff_check(
            &mut [&mut self.enc, &mut self.aux_p],
            eps,
            max_coords,
            rng,
            |tape, b| {
                graph
                    .build(tape, &b[0], &b[1], seg, &draws, None, bisim.as_ref())
                    .map(|(loss, _)| loss)
                    .map_err(tensor_err)
            },
        )?;
        Ok(Some(report))
    }

    /// Samples from `replay` and runs one SAC and one auxiliary update.
    pub fn update(&mut self, replay: &ReplayBuffer, rng: &mut ChaCha8Rng) -> Result<(SacStats, Option<f64>)> {
        let b = self.cfg.sac.batch_size;
        let tb = replay.sample_transitions(b, rng)?;
        let sac = self.update_sac(&tb)?;
        let aux = if self.cfg.objective == Objective::None {
            None
        } else {
            let seg = replay.sample_segments(b, self.horizon, rng)?;
            self.update_aux(&seg)?
        };
        Ok((sac, aux))
    }

    /// Writes every parameter store under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, store) in self.stores() {
            store.save(&dir.join(format!("{name}.ckpt")))?;
        }
        Ok(())
    }

    /// Loads parameters written by [`Agent::save`] into an agent built with
    /// the same configuration.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        for (name, store) in self.stores_mut() {
            store.load_into(&dir.join(format!("{name}.ckpt")))?;
        }
        Ok(())
    }

    fn stores(&self) -> [(&'static str, &ParamStore); 7] {
        [
            ("encoder", &self.enc),
            ("encoder_target", &self.enc_target),
            ("actor", &self.actor_p),
            ("critic", &self.critic_p),
            ("critic_target", &self.critic_target),
            ("log_alpha", &self.log_alpha),
            ("aux", &self.aux_p),
        ]
    }

    fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore); 7] {
        [
            ("encoder", &mut self.enc),
            ("encoder_target", &mut self.enc_target),
            ("actor", &mut self.actor_p),
            ("critic", &mut self.critic_p),
            ("critic_target", &mut self.critic_target),
            ("log_alpha", &mut self.log_alpha),
            ("aux", &mut self.aux_p),
        ]
    }
}
