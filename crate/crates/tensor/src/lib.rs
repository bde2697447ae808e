//! Small reverse-mode automatic differentiation engine in double precision.
//!
//! Build a [`Tape`] per forward pass, bind parameters from a [`ParamStore`],
//! call [`Tape::backward`] on a scalar loss and hand the collected [`Grads`]
//! to an [`Adam`] optimizer.

pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, Grads, ParamId, ParamStore};
pub use tape::{conv_out_extent, ConvGeom, Gradients, Tape, Var};
pub use tensor::Tensor;
