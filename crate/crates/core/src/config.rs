//! Run configuration: a TOML file with one table per component.
//!
//! Every table is optional and every key has a default, so an empty file is a
//! valid configuration. Unknown keys are rejected.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! out_dir = "runs/grid"
//!
//! [env]
//! family = "grid"
//!
//! [agent]
//! objective = "cresp_t"
//! [agent.sac]
//! batch_size = 32
//! [agent.predictor]
//! reward_length = 2
//!
//! [train]
//! steps = 50000
//!
//! [sweep]
//! objectives = ["cresp_t", "tdp", "none"]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::train::TrainConfig;
use crate::agent::{AgentConfig, Objective};
use crate::env::{DistractorKind, EnvSpec, FamilyKind};
use crate::error::{Error, Result};
use crate::probes::ProbeConfig;
use crate::seeding::{derive_seed, Stream};

fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub family: FamilyKind,
    pub distractor: DistractorKind,
    pub episode_len: usize,
    pub grid_size: usize,
    pub stochastic_reward: bool,
    /// Family seed. Unset means the run's master seed.
    pub seed: Option<u64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            family: FamilyKind::Grid,
            distractor: DistractorKind::ColorDrift,
            episode_len: 100,
            grid_size: 9,
            stochastic_reward: false,
            seed: None,
        }
    }
}

impl EnvConfig {
    /// Base spec of the family for master seed `seed`; the discount comes
    /// from the agent so both sides agree.
    pub fn spec(&self, seed: u64, gamma: f64) -> Result<EnvSpec> {
        let family_seed = self.seed.unwrap_or(seed);
        let mut spec = EnvSpec::grid(family_seed);
        spec.family = self.family;
        spec.distractor_kind = self.distractor;
        spec.episode_len = self.episode_len;
        spec.grid_size = self.grid_size;
        spec.stochastic_reward = self.stochastic_reward;
        spec.gamma = gamma;
        spec.reward_bound = spec.max_abs_reward();
        spec.validate().map_err(|e| cfg_err("env", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub instances: usize,
    pub horizons: Vec<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            horizons: vec![1, 2, 3],
        }
    }
}

/// Grid of runs. Empty lists fall back to the single value in `[agent]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub objectives: Vec<Objective>,
    pub reward_lengths: Vec<usize>,
    /// Probe every trained encoder and add the scores to the summary.
    pub probe: bool,
    /// Runs trained concurrently, each on one thread.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub oracle: OracleConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            oracle: OracleConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // serde names the offending key between backticks.
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::Config { key, msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "needs at least one seed"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(cfg_err("seeds", "contains duplicates"));
        }
        self.agent.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        for &s in &self.seeds {
            self.env.spec(s, self.agent.sac.gamma)?;
        }
        if self.env.episode_len < self.agent.reward_length() {
            return Err(cfg_err("env.episode_len", "shorter than the reward-sequence length"));
        }
        if self.oracle.instances == 0 {
            return Err(cfg_err("oracle.instances", "must be positive"));
        }
        if self.oracle.horizons.is_empty() || self.oracle.horizons.contains(&0) {
            return Err(cfg_err("oracle.horizons", "needs positive horizons"));
        }
        if self.sweep.reward_lengths.contains(&0) {
            return Err(cfg_err("sweep.reward_lengths", "must be at least 1"));
        }
        if self.sweep.workers == Some(0) {
            return Err(cfg_err("sweep.workers", "must be positive"));
        }
        Ok(())
    }

    /// Resolved configuration with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    pub fn env_spec(&self, seed: u64) -> Result<EnvSpec> {
        self.env.spec(seed, self.agent.sac.gamma)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_toml(&text)
}

/// Provenance written into every run directory.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub version: String,
    pub master_seed: u64,
    pub family_seed: u64,
    /// `(stream, tag, seed for index 0)` for every stream.
    pub streams: Vec<(String, u64, u64)>,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: seed,
            family_seed: cfg.env.seed.unwrap_or(seed),
            streams: Stream::ALL
                .iter()
                .map(|&s| (s.name().to_string(), s.tag(), derive_seed(seed, s, 0)))
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.agent.sac.gamma, 0.99);
        assert_eq!(cfg.agent.sac.lr, 1e-3);
        assert_eq!(cfg.agent.sac.batch_size, 128);
        assert_eq!(cfg.agent.predictor.lambda, 0.5);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seeds = vec![3, 4];
        cfg.sweep.objectives = vec![Objective::Tdp, Objective::None];
        cfg.agent.predictor.reward_length = Some(2);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let bad_gamma = RunConfig::from_toml("[agent.sac]\ngamma = 1.2\n").unwrap_err();
        assert!(
            matches!(&bad_gamma, Error::Config { key, .. } if key == "sac.gamma"),
            "{bad_gamma}"
        );
        let typo = RunConfig::from_toml("[agent.sac]\nleraning_rate = 0.1\n").unwrap_err();
        assert!(
            matches!(&typo, Error::Config { key, .. } if key == "leraning_rate"),
            "{typo}"
        );
        let wrong_type = RunConfig::from_toml("seeds = \"zero\"\n").unwrap_err();
        assert!(wrong_type.to_string().contains("seeds") || wrong_type.to_string().contains("sequence"));
        assert!(RunConfig::from_toml("seeds = []\n").is_err());
        assert!(RunConfig::from_toml("[env]\ngrid_size = 2\n").is_err());
    }

    #[test]
    fn manifest_lists_every_stream() {
        let m = Manifest::new(&RunConfig::default(), 7);
        assert_eq!(m.streams.len(), Stream::ALL.len());
        assert!(m.to_toml().contains("master_seed = 7"));
    }
}
