//! Layers built from tape primitives. Each layer owns parameter ids in a
//! [`ParamStore`] and applies itself to a [`Bound`] copy of that store.

use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn uniform(shape: &[usize], bound: f64, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Weights and biases drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut (impl Rng + ?Sized),
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[input, output], bound, rng))?;
        let b = store.add(format!("{name}.b"), uniform(&[output], bound, rng))?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.w))?;
        tape.add_row(h, p.var(self.b))
    }

    /// `x·W` without the bias.
    pub fn forward_no_bias(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.matmul(x, p.var(self.w))
    }
}

/// Stack of linear layers with ReLU between them and no output activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`.
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }
}

/// Square-kernel convolution layer over NCHW inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut (impl Rng + ?Sized),
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
        )?;
        let b = store.add(format!("{name}.b"), uniform(&[out_ch], bound, rng))?;
        Ok(Self { w, b, stride, pad })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, shift, eps: 1e-5 })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, self.eps)?;
        let s = tape.mul_row(n, p.var(self.gain))?;
        tape.add_row(s, p.var(self.shift))
    }
}
