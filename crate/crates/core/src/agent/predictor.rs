//! Characteristic-function predictors `Ψ = (ψ_cos, ψ_sin)`.
//!
//! Both predictors map a representation `z`, an action sequence and a set of
//! κ frequencies to `[batch, κ]` cosine and sine predictions. Each ω row is
//! processed independently of the others.

use cresp_tensor::nn::{LayerNorm, Linear};
use cresp_tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn check_inputs(
    tape: &Tape,
    z: Var,
    actions: Var,
    omegas: Var,
    repr: usize,
    act_width: usize,
    omega_dim: usize,
) -> Result<(usize, usize)> {
    let zs = tape.shape(z);
    let as_ = tape.shape(actions);
    let os = tape.shape(omegas);
    if zs.len() != 2 || zs[1] != repr {
        return Err(Error::Length {
            what: "representation width",
            left: zs.last().copied().unwrap_or(0),
            right: repr,
        });
    }
    if as_.len() != 2 || as_[1] != act_width || as_[0] != zs[0] {
        return Err(Error::Length {
            what: "action sequence width vs horizon*action_dim",
            left: as_.last().copied().unwrap_or(0),
            right: act_width,
        });
    }
    if os.len() != 2 || os[1] != omega_dim {
        return Err(Error::Length {
            what: "omega width vs predictor horizon",
            left: os.last().copied().unwrap_or(0),
            right: omega_dim,
        });
    }
    Ok((zs[0], os[0]))
}

/// One trunk layer on `concat(z, a, ω)` followed by separate cos and sin
/// output layers.
#[derive(Clone, Debug)]
pub struct MlpPredictor {
    za: Linear,
    omega: ParamId,
    head_cos: Linear,
    head_sin: Linear,
    repr_dim: usize,
    act_width: usize,
    omega_dim: usize,
}

impl MlpPredictor {
    pub fn new(
        store: &mut ParamStore,
        repr_dim: usize,
        act_width: usize,
        omega_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let za = Linear::new(store, "pred.za", repr_dim + act_width, hidden, rng)?;
        let bound = 1.0 / (omega_dim as f64).sqrt();
        let w: Vec<f64> = (0..omega_dim * hidden)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let omega = store.add("pred.omega.w", Tensor::new(vec![omega_dim, hidden], w)?)?;
        let head_cos = Linear::new(store, "pred.cos", hidden, 1, rng)?;
        let head_sin = Linear::new(store, "pred.sin", hidden, 1, rng)?;
        Ok(Self {
            za,
            omega,
            head_cos,
            head_sin,
            repr_dim,
            act_width,
            omega_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, actions: Var, omegas: Var) -> Result<(Var, Var)> {
        let (batch, kappa) = check_inputs(tape, z, actions, omegas, self.repr_dim, self.act_width, self.omega_dim)?;
        let x = tape.concat_cols(&[z, actions])?;
        let hz = self.za.forward(tape, p, x)?;
        let hw = tape.matmul(omegas, p.var(self.omega))?;
        // Row b·κ + k holds instance b evaluated at ω_k.
        let h = tape.outer_add(hz, hw)?;
        let h = tape.relu(h)?;
        let c = self.head_cos.forward(tape, p, h)?;
        let s = self.head_sin.forward(tape, p, h)?;
        Ok((tape.reshape(c, &[batch, kappa])?, tape.reshape(s, &[batch, kappa])?))
    }
}

/// Pre-norm transformer block with ReLU feed-forward.
#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 4 * d, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d, d, rng)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        geom: (usize, usize, usize),
        mask: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (n_seq, len, heads) = geom;
        let h = self.ln1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let a = tape.attention(qkv, n_seq, len, heads, mask)?;
        let a = self.proj.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        self.feed_forward(tape, p, x)
    }

    /// Block output at token `query` of each sequence only, `[n_seq, d]`.
    fn forward_at(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        geom: (usize, usize, usize),
        query: usize,
        mask: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (n_seq, len, heads) = geom;
        let h = self.ln1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let a = tape.attention_at(qkv, n_seq, len, heads, query, mask)?;
        let a = self.proj.forward(tape, p, a)?;
        let rows: Vec<usize> = (0..n_seq).map(|s| s * len + query).collect();
        let xq = tape.gather_rows(x, &rows)?;
        let x = tape.add(xq, a)?;
        self.feed_forward(tape, p, x)
    }

    fn feed_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Position of the ω token in `[z, ω, a_1, ..., a_T]`.
const OMEGA_TOKEN: usize = 1;

/// Transformer over the token sequence `[z, ω, a_1, ..., a_T]`.
///
/// The first `n_blocks - 2` blocks are shared; the last two run in parallel
/// as the cosine and sine heads. Each head reads its scalar prediction from
/// the ω token.
#[derive(Clone, Debug)]
pub struct TransformerPredictor {
    z_in: Linear,
    omega_in: Linear,
    action_in: Linear,
    pos: ParamId,
    shared: Vec<Block>,
    head_cos: Block,
    head_sin: Block,
    norm_cos: LayerNorm,
    norm_sin: LayerNorm,
    out_cos: Linear,
    out_sin: Linear,
    heads: usize,
    dropout: f64,
    repr_dim: usize,
    horizon: usize,
    action_dim: usize,
    omega_dim: usize,
}

impl TransformerPredictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        repr_dim: usize,
        horizon: usize,
        action_dim: usize,
        omega_dim: usize,
        model_dim: usize,
        n_blocks: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_blocks < 2 {
            return Err(crate::error::invalid("transformer predictor needs at least two blocks"));
        }
        let d = model_dim;
        let len = horizon + 2;
        let pos: Vec<f64> = (0..len * d).map(|_| 0.02 * rng.random_range(-1.0..1.0)).collect();
        Ok(Self {
            z_in: Linear::new(store, "pred.z_in", repr_dim, d, rng)?,
            omega_in: Linear::new(store, "pred.omega_in", omega_dim, d, rng)?,
            action_in: Linear::new(store, "pred.action_in", action_dim, d, rng)?,
            pos: store.add("pred.pos", Tensor::new(vec![len, d], pos)?)?,
            shared: (0..n_blocks - 2)
                .map(|i| Block::new(store, &format!("pred.block{i}"), d, rng))
                .collect::<Result<_>>()?,
            head_cos: Block::new(store, "pred.cos_block", d, rng)?,
            head_sin: Block::new(store, "pred.sin_block", d, rng)?,
            norm_cos: LayerNorm::new(store, "pred.cos_norm", d)?,
            norm_sin: LayerNorm::new(store, "pred.sin_norm", d)?,
            out_cos: Linear::new(store, "pred.cos_out", d, 1, rng)?,
            out_sin: Linear::new(store, "pred.sin_out", d, 1, rng)?,
            heads,
            dropout,
            repr_dim,
            horizon,
            action_dim,
            omega_dim,
        })
    }

    /// `queries` is the number of attending positions per sequence.
    fn mask(&self, n_seq: usize, queries: usize, len: usize, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
        let rng = rng?;
        if self.dropout == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.dropout);
        Some(
            (0..n_seq * self.heads * queries * len)
                .map(|_| if rng.random_bool(self.dropout) { 0.0 } else { keep })
                .collect(),
        )
    }

    /// Attention dropout is applied only when `dropout_rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        actions: Var,
        omegas: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let width = self.horizon * self.action_dim;
        let (batch, kappa) = check_inputs(tape, z, actions, omegas, self.repr_dim, width, self.omega_dim)?;
        let len = self.horizon + 2;
        let n_seq = batch * kappa;
        let zt = self.z_in.forward(tape, p, z)?;
        let wt = self.omega_in.forward(tape, p, omegas)?;
        let a = tape.reshape(actions, &[batch * self.horizon, self.action_dim])?;
        let at = self.action_in.forward(tape, p, a)?;
        let table = tape.concat_rows(&[zt, wt, at])?;
        let mut idx = Vec::with_capacity(n_seq * len);
        for b in 0..batch {
            for k in 0..kappa {
                idx.push(b);
                idx.push(batch + k);
                for t in 0..self.horizon {
                    idx.push(batch + kappa + b * self.horizon + t);
                }
            }
        }
        let tokens = tape.gather_rows(table, &idx)?;
        let pos_idx: Vec<usize> = (0..n_seq).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(p.var(self.pos), &pos_idx)?;
        let mut x = tape.add(tokens, pos)?;
        let geom = (n_seq, len, self.heads);
        for block in &self.shared {
            let m = self.mask(n_seq, len, len, dropout_rng.as_deref_mut());
            x = block.forward(tape, p, x, geom, m)?;
        }
        let mut outs = Vec::with_capacity(2);
        for (block, norm, out) in [
            (&self.head_cos, &self.norm_cos, &self.out_cos),
            (&self.head_sin, &self.norm_sin, &self.out_sin),
        ] {
            // Only the ω token is read out, so the head blocks skip the
            // other positions.
            let m = self.mask(n_seq, 1, len, dropout_rng.as_deref_mut());
            let h = block.forward_at(tape, p, x, geom, OMEGA_TOKEN, m)?;
            let h = norm.forward(tape, p, h)?;
            let y = out.forward(tape, p, h)?;
            outs.push(tape.reshape(y, &[batch, kappa])?);
        }
        Ok((outs[0], outs[1]))
    }
}

/// Either predictor behind one interface.
#[derive(Clone, Debug)]
pub enum CfPredictor {
    Mlp(MlpPredictor),
    Transformer(TransformerPredictor),
}

impl CfPredictor {
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        actions: Var,
        omegas: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        match self {
            CfPredictor::Mlp(m) => m.forward(tape, p, z, actions, omegas),
            CfPredictor::Transformer(t) => t.forward(tape, p, z, actions, omegas, dropout_rng),
        }
    }
}
