//! Adam with bias correction.

use crate::error::{Result, TensorError};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
///
/// Several optimizers may update the same store (for instance a shared
/// encoder trained by two losses); each keeps its own moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `store` from `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        let params = store.tensors_mut();
        if params.len() != grads.tensors().len() || params.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.tensors().len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads.tensors()).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w)).unwrap();
        s
    }

    fn grads_of(g: f64) -> Grads {
        let mut gr = Grads::zeros_like(&scalar_store(0.0));
        gr.tensors_mut()[0].data_mut()[0] = g;
        gr
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        let mut opt = Adam::new(&s, AdamConfig::with_lr(1e-3));
        opt.step(&mut s, &grads_of(1.0)).unwrap();
        let w = s.tensors()[0].item();
        assert!((w + 1e-3).abs() < 1e-9, "w = {w}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar_store(0.7);
        let mut opt = Adam::new(&s, AdamConfig::default());
        opt.step(&mut s, &grads_of(0.0)).unwrap();
        assert_eq!(s.tensors()[0].item(), 0.7);
    }

    #[test]
    fn quadratic_converges_near_minimum() {
        let mut s = scalar_store(0.0);
        let mut opt = Adam::new(&s, AdamConfig::with_lr(0.1));
        for _ in 0..100 {
            let w = s.tensors()[0].item();
            opt.step(&mut s, &grads_of(2.0 * (w - 3.0))).unwrap();
        }
        let w = s.tensors()[0].item();
        assert!((w - 3.0).abs() < 0.5, "w = {w}");
    }

    #[test]
    fn mismatched_gradients_error() {
        let mut s = scalar_store(0.0);
        let mut opt = Adam::new(&s, AdamConfig::default());
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[2])).unwrap();
        let bad = Grads::zeros_like(&other);
        assert!(opt.step(&mut s, &bad).is_err());
    }
}
