//! Characteristic-function targets and the spectral losses built on them.
//!
//! For a reward sequence `r ∈ R^T` and frequency `ω ∈ R^T` the phase is the
//! discounted inner product `⟨ω, r⟩ = Σ_{t=1..T} γ^t ω_t r_t`. Targets are
//! `cos` and `sin` of that phase for every (instance, ω) pair.

use cresp_tensor::{Tape, Tensor, Var};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

/// Guards the per-instance normalizer of the spectral cosine loss.
pub const SCS_EPS: f64 = 1e-10;

/// `Σ_t γ^t ω_t r_t` with `t` starting at 1.
pub fn discounted_inner(omega: &[f64], r: &[f64], gamma: f64) -> Result<f64> {
    if omega.len() != r.len() {
        return Err(Error::Length {
            what: "omega vs reward sequence",
            left: omega.len(),
            right: r.len(),
        });
    }
    let mut g = gamma;
    let mut acc = 0.0;
    for (w, x) in omega.iter().zip(r) {
        acc += g * w * x;
        g *= gamma;
    }
    Ok(acc)
}

/// `Σ_t γ^t r_t` with `t` starting at 1.
pub fn discounted_sum(r: &[f64], gamma: f64) -> f64 {
    let mut g = gamma;
    let mut acc = 0.0;
    for x in r {
        acc += g * x;
        g *= gamma;
    }
    acc
}

/// `kappa × dim` frequencies, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaBatch {
    pub kappa: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl OmegaBatch {
    pub fn new(kappa: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if kappa == 0 || dim == 0 {
            return Err(invalid("omega batch needs kappa >= 1 and dim >= 1"));
        }
        if data.len() != kappa * dim {
            return Err(Error::Length {
                what: "omega data vs kappa*dim",
                left: data.len(),
                right: kappa * dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("omega entries must be finite"));
        }
        Ok(Self { kappa, dim, data })
    }

    /// I.i.d. standard normal entries.
    pub fn sample(kappa: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let data = (0..kappa * dim).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(kappa, dim, data)
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.kappa, self.dim], self.data.clone()).expect("sizes checked at construction")
    }
}

/// `batch × kappa` cosine and sine targets, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CfTargets {
    pub batch: usize,
    pub kappa: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl CfTargets {
    fn from_phases(batch: usize, kappa: usize, phases: Vec<f64>) -> Self {
        let cos = phases.iter().map(|p| p.cos()).collect();
        let sin = phases.iter().map(|p| p.sin()).collect();
        Self { batch, kappa, cos, sin }
    }

    pub fn cos_tensor(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.kappa], self.cos.clone()).expect("consistent sizes")
    }

    pub fn sin_tensor(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.kappa], self.sin.clone()).expect("consistent sizes")
    }
}

/// Targets from reward sequences (`rewards` is `batch × T` row-major).
pub fn cf_targets(omegas: &OmegaBatch, rewards: &[f64], horizon: usize, gamma: f64) -> Result<CfTargets> {
    if horizon != omegas.dim {
        return Err(Error::Length {
            what: "reward horizon vs omega dim",
            left: horizon,
            right: omegas.dim,
        });
    }
    if horizon == 0 || !rewards.len().is_multiple_of(horizon) {
        return Err(invalid("reward buffer is not a whole number of sequences"));
    }
    let batch = rewards.len() / horizon;
    let mut phases = Vec::with_capacity(batch * omegas.kappa);
    for r in rewards.chunks(horizon) {
        for k in 0..omegas.kappa {
            phases.push(discounted_inner(omegas.row(k), r, gamma)?);
        }
    }
    Ok(CfTargets::from_phases(batch, omegas.kappa, phases))
}

/// Targets for the scalar discounted sum `Σ_t γ^t r_t` probed by scalar ω.
pub fn cf_targets_sum(omegas: &OmegaBatch, rewards: &[f64], horizon: usize, gamma: f64) -> Result<CfTargets> {
    if omegas.dim != 1 {
        return Err(Error::Length {
            what: "scalar omega dim",
            left: omegas.dim,
            right: 1,
        });
    }
    if horizon == 0 || !rewards.len().is_multiple_of(horizon) {
        return Err(invalid("reward buffer is not a whole number of sequences"));
    }
    let batch = rewards.len() / horizon;
    let mut phases = Vec::with_capacity(batch * omegas.kappa);
    for r in rewards.chunks(horizon) {
        let s = discounted_sum(r, gamma);
        for k in 0..omegas.kappa {
            phases.push(omegas.data[k] * s);
        }
    }
    Ok(CfTargets::from_phases(batch, omegas.kappa, phases))
}

fn check_pred(tape: &Tape, pred_cos: Var, pred_sin: Var, t: &CfTargets) -> Result<()> {
    let want = [t.batch, t.kappa];
    for v in [pred_cos, pred_sin] {
        if tape.shape(v) != want {
            return Err(Error::Length {
                what: "prediction rows*cols vs targets",
                left: tape.value(v).len(),
                right: t.batch * t.kappa,
            });
        }
    }
    Ok(())
}

/// Mean over instances and ω of `(ĉ - cos)² + (ŝ - sin)²`.
pub fn wse_loss(tape: &mut Tape, pred_cos: Var, pred_sin: Var, targets: &CfTargets) -> Result<Var> {
    check_pred(tape, pred_cos, pred_sin, targets)?;
    let c = tape.constant(targets.cos_tensor());
    let s = tape.constant(targets.sin_tensor());
    let dc = tape.sub(pred_cos, c)?;
    let ds = tape.sub(pred_sin, s)?;
    let dc2 = tape.square(dc)?;
    let ds2 = tape.square(ds)?;
    let tot = tape.add(dc2, ds2)?;
    Ok(tape.mean(tot)?)
}

/// Negative spectral cosine similarity, normalized per instance by the
/// predictor's spectral norm and averaged over instances.
pub fn scs_loss(tape: &mut Tape, pred_cos: Var, pred_sin: Var, targets: &CfTargets) -> Result<Var> {
    check_pred(tape, pred_cos, pred_sin, targets)?;
    let c = tape.constant(targets.cos_tensor());
    let s = tape.constant(targets.sin_tensor());
    let pc_c = tape.mul(pred_cos, c)?;
    let ps_s = tape.mul(pred_sin, s)?;
    let align = tape.add(pc_c, ps_s)?;
    let num = tape.mean_cols(align)?;
    let pc2 = tape.square(pred_cos)?;
    let ps2 = tape.square(pred_sin)?;
    let energy = tape.add(pc2, ps2)?;
    let energy = tape.mean_cols(energy)?;
    let energy = tape.add_scalar(energy, SCS_EPS)?;
    let den = tape.sqrt(energy)?;
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio)?;
    Ok(tape.neg(m)?)
}

/// `wse + lambda · scs`.
pub fn combined_loss(tape: &mut Tape, pred_cos: Var, pred_sin: Var, targets: &CfTargets, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let wse = wse_loss(tape, pred_cos, pred_sin, targets)?;
    if lambda == 0.0 {
        return Ok(wse);
    }
    let scs = scs_loss(tape, pred_cos, pred_sin, targets)?;
    let scs = tape.scale(scs, lambda)?;
    Ok(tape.add(wse, scs)?)
}

/// Monte Carlo characteristic function from sampled reward sequences.
pub fn empirical_cf(samples: &[Vec<f64>], omega: &[f64], gamma: f64) -> Result<Complex64> {
    if samples.is_empty() {
        return Err(invalid("empirical characteristic function needs at least one sample"));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for r in samples {
        acc += Complex64::from_polar(1.0, discounted_inner(omega, r, gamma)?);
    }
    Ok(acc / samples.len() as f64)
}
