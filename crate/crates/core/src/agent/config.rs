//! Agent hyperparameters. Defaults follow the reference hyperparameter
//! table except where a desk-scale value is documented on the field.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// Auxiliary representation objective trained alongside SAC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cresp,
    CrespT,
    CrespSum,
    Rsp,
    RspSum,
    Tdp,
    Rdp,
    RdpBm,
    None,
}

impl Objective {
    pub const ALL: [Objective; 9] = [
        Objective::Cresp,
        Objective::CrespT,
        Objective::CrespSum,
        Objective::Rsp,
        Objective::RspSum,
        Objective::Tdp,
        Objective::Rdp,
        Objective::RdpBm,
        Objective::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Cresp => "cresp",
            Objective::CrespT => "cresp_t",
            Objective::CrespSum => "cresp_sum",
            Objective::Rsp => "rsp",
            Objective::RspSum => "rsp_sum",
            Objective::Tdp => "tdp",
            Objective::Rdp => "rdp",
            Objective::RdpBm => "rdp_bm",
            Objective::None => "none",
        }
    }

    /// Reward-sequence length used when none is configured.
    pub fn default_reward_length(self) -> usize {
        match self {
            Objective::CrespT => 2,
            Objective::None => 1,
            _ => 5,
        }
    }

    pub fn uses_cf(self) -> bool {
        matches!(self, Objective::Cresp | Objective::CrespT | Objective::CrespSum)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == norm)
            .ok_or_else(|| cfg_err("objective", format!("unknown objective '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Conv,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `None` picks conv for image observations and mlp otherwise.
    pub kind: Option<EncoderKind>,
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub repr_dim: usize,
    /// Hidden width of the mlp encoder.
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: None,
            conv_layers: 4,
            filters: 32,
            kernel: 3,
            repr_dim: 64,
            mlp_hidden: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers == 0 {
            return Err(cfg_err("encoder.conv_layers", "must be at least 1"));
        }
        if self.filters == 0 {
            return Err(cfg_err("encoder.filters", "must be positive"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(cfg_err("encoder.kernel", "must be odd and positive"));
        }
        if self.repr_dim == 0 {
            return Err(cfg_err("encoder.repr_dim", "must be positive"));
        }
        if self.mlp_hidden == 0 {
            return Err(cfg_err("encoder.mlp_hidden", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub lr: f64,
    /// Actor and critic hidden width (reference 1024).
    pub hidden_dim: usize,
    pub tau: f64,
    pub critic_target_update_freq: usize,
    pub actor_update_freq: usize,
    pub init_temperature: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub init_steps: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-3,
            hidden_dim: 256,
            tau: 0.01,
            critic_target_update_freq: 2,
            actor_update_freq: 1,
            init_temperature: 0.1,
            log_std_min: -5.0,
            log_std_max: 2.0,
            init_steps: 1000,
            batch_size: 128,
            buffer_capacity: 100_000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(cfg_err("sac.gamma", format!("{} outside [0, 1)", self.gamma)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err("sac.lr", "must be positive"));
        }
        if self.hidden_dim == 0 {
            return Err(cfg_err("sac.hidden_dim", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(cfg_err("sac.tau", format!("{} outside (0, 1]", self.tau)));
        }
        if self.critic_target_update_freq == 0 {
            return Err(cfg_err("sac.critic_target_update_freq", "must be at least 1"));
        }
        if self.actor_update_freq == 0 {
            return Err(cfg_err("sac.actor_update_freq", "must be at least 1"));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(cfg_err("sac.init_temperature", "must be positive"));
        }
        if !(self.log_std_min < self.log_std_max) {
            return Err(cfg_err("sac.log_std_min", "must be below log_std_max"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("sac.batch_size", "must be positive"));
        }
        if self.buffer_capacity == 0 {
            return Err(cfg_err("sac.buffer_capacity", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Mlp,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// `None` follows the objective: transformer for CRESP-T, mlp otherwise.
    pub kind: Option<PredictorKind>,
    /// Hidden width of mlp predictors and baseline heads.
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Token width of the transformer.
    pub model_dim: usize,
    /// `None` uses the objective's default length.
    pub reward_length: Option<usize>,
    /// Number of ω samples per update (reference 256).
    pub kappa: usize,
    pub lambda: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: None,
            hidden_dim: 256,
            n_blocks: 3,
            n_heads: 2,
            dropout: 0.1,
            model_dim: 64,
            reward_length: None,
            kappa: 32,
            lambda: 0.5,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(cfg_err("predictor.hidden_dim", "must be positive"));
        }
        if self.n_blocks < 2 {
            return Err(cfg_err("predictor.n_blocks", "needs at least the two head blocks"));
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(cfg_err("predictor.n_heads", "must divide model_dim"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(cfg_err("predictor.dropout", "must lie in [0, 1)"));
        }
        if self.reward_length == Some(0) {
            return Err(cfg_err("predictor.reward_length", "must be at least 1"));
        }
        if self.kappa == 0 {
            return Err(cfg_err("predictor.kappa", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(cfg_err("predictor.lambda", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Everything needed to build an [`crate::agent::Agent`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub objective: Objective,
    pub encoder: EncoderConfig,
    pub sac: SacConfig,
    pub predictor: PredictorConfig,
    /// Random shift of image observations by up to `shift_pad` cells.
    pub augment: bool,
    pub shift_pad: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            objective: Objective::CrespT,
            encoder: EncoderConfig::default(),
            sac: SacConfig::default(),
            predictor: PredictorConfig::default(),
            augment: true,
            shift_pad: 2,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sac.validate()?;
        self.predictor.validate()
    }

    pub fn reward_length(&self) -> usize {
        self.predictor
            .reward_length
            .unwrap_or_else(|| self.objective.default_reward_length())
    }

    pub fn predictor_kind(&self) -> PredictorKind {
        self.predictor.kind.unwrap_or(match self.objective {
            Objective::CrespT => PredictorKind::Transformer,
            _ => PredictorKind::Mlp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_parsing() {
        assert_eq!("CRESP-T".parse::<Objective>().unwrap(), Objective::CrespT);
        assert_eq!("rdp_bm".parse::<Objective>().unwrap(), Objective::RdpBm);
        assert!("bogus".parse::<Objective>().is_err());
    }

    #[test]
    fn reward_length_defaults() {
        let mut c = AgentConfig::default();
        assert_eq!(c.reward_length(), 2);
        c.objective = Objective::Cresp;
        assert_eq!(c.reward_length(), 5);
        c.predictor.reward_length = Some(3);
        assert_eq!(c.reward_length(), 3);
    }
}
