//! Characteristic-function reward-sequence representation learning.
//!
//! The crate contains the environment families, exact tabular oracles, the
//! characteristic-function losses, replay storage, the SAC agent with its
//! auxiliary objectives, representation probes and the run orchestration used
//! by the `cresp` binary.

mod error;

pub mod agent;
pub mod config;
pub mod env;
pub mod probes;
pub mod replay;
pub mod runner;
pub mod seeding;
pub mod spectral;
pub mod tabular;

pub use error::{Error, Result};
