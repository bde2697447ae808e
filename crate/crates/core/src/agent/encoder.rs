//! Observation encoder `Φ`: conv stack or MLP, then a dense layer with
//! layer normalization and tanh.

use cresp_tensor::nn::{Conv2d, LayerNorm, Linear};
use cresp_tensor::{conv_out_extent, Bound, ParamStore, Tape, Var};
use rand::Rng;

use super::config::{EncoderConfig, EncoderKind};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug)]
enum Trunk {
    /// Convolutions over a `[C, H, W]` image, flattened to `flat` features.
    Conv {
        convs: Vec<Conv2d>,
        shape: [usize; 3],
        flat: usize,
    },
    Mlp {
        hidden: Linear,
    },
}

/// Layer layout of an encoder; parameters live in a separate store so the
/// same layout serves both the online and the target copy.
#[derive(Clone, Debug)]
pub struct Encoder {
    trunk: Trunk,
    head: Linear,
    norm: LayerNorm,
    obs_dim: usize,
    repr_dim: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, obs_shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let obs_dim: usize = obs_shape.iter().product();
        let kind = cfg.kind.unwrap_or(if obs_shape.len() == 3 {
            EncoderKind::Conv
        } else {
            EncoderKind::Mlp
        });
        let (trunk, feat) = match kind {
            EncoderKind::Conv => {
                let &[c, h, w] = obs_shape else {
                    return Err(invalid(format!(
                        "conv encoder needs a [C, H, W] observation, got {obs_shape:?}"
                    )));
                };
                let k = cfg.kernel;
                let mut convs = Vec::with_capacity(cfg.conv_layers);
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for i in 0..cfg.conv_layers {
                    let (stride, pad) = if i == 0 { (2, 0) } else { (1, k / 2) };
                    let oh = conv_out_extent(hh, k, stride, pad);
                    let ow = conv_out_extent(ww, k, stride, pad);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(invalid(format!(
                            "observation {obs_shape:?} too small for conv layer {i}"
                        )));
                    };
                    convs.push(Conv2d::new(
                        store,
                        &format!("enc.conv{i}"),
                        ch,
                        cfg.filters,
                        k,
                        stride,
                        pad,
                        rng,
                    )?);
                    (ch, hh, ww) = (cfg.filters, oh, ow);
                }
                let flat = ch * hh * ww;
                (
                    Trunk::Conv {
                        convs,
                        shape: [c, h, w],
                        flat,
                    },
                    flat,
                )
            }
            EncoderKind::Mlp => {
                let hidden = Linear::new(store, "enc.hidden", obs_dim, cfg.mlp_hidden, rng)?;
                (Trunk::Mlp { hidden }, cfg.mlp_hidden)
            }
        };
        let head = Linear::new(store, "enc.head", feat, cfg.repr_dim, rng)?;
        let norm = LayerNorm::new(store, "enc.norm", cfg.repr_dim)?;
        Ok(Self {
            trunk,
            head,
            norm,
            obs_dim,
            repr_dim: cfg.repr_dim,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn repr_dim(&self) -> usize {
        self.repr_dim
    }

    /// `obs` is `[batch, obs_dim]`; returns `[batch, repr_dim]` in `(-1, 1)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, obs: Var) -> Result<Var> {
        let shape = tape.shape(obs).to_vec();
        if shape.len() != 2 || shape[1] != self.obs_dim {
            return Err(Error::Length {
                what: "observation width vs encoder input",
                left: shape.last().copied().unwrap_or(0),
                right: self.obs_dim,
            });
        }
        let batch = shape[0];
        let feat = match &self.trunk {
            Trunk::Conv { convs, shape, flat } => {
                let mut h = tape.reshape(obs, &[batch, shape[0], shape[1], shape[2]])?;
                for conv in convs {
                    h = conv.forward(tape, p, h)?;
                    h = tape.relu(h)?;
                }
                tape.reshape(h, &[batch, *flat])?
            }
            Trunk::Mlp { hidden } => {
                let h = hidden.forward(tape, p, obs)?;
                tape.relu(h)?
            }
        };
        let z = self.head.forward(tape, p, feat)?;
        let z = self.norm.forward(tape, p, z)?;
        Ok(tape.tanh(z)?)
    }
}
