//! Run configuration file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::rewards::RewardConfig;
use crate::sim::SimConfig;
use crate::training::{TrainConfig, TrainSetup};
use crate::value_net::Widths;

pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub n_agents: usize,
    pub widths: Widths,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_agents: 2,
            widths: Widths::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Random cases before mirroring; the evaluated set is twice this.
    pub test_cases: usize,
    pub n_agents: usize,
    pub case_seed: u64,
    pub rollout_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_cases: 100,
            n_agents: 2,
            case_seed: 42,
            rollout_seed: 0,
        }
    }
}

/// Every section is optional; missing keys take their defaults and unknown
/// keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub rewards: RewardConfig,
    pub policy: PolicyConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.setup().validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("{}: not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => {
                Error::Config(format!("{}: {}", path.display(), m.replace('\n', " ")))
            }
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration, defaults included, into `dir`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(ECHO_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            n_agents: self.network.n_agents,
            widths: self.network.widths,
            network_seed: self.network.seed,
            sim: self.sim,
            rewards: self.rewards,
            policy: self.policy.clone(),
            training: self.training.clone(),
        }
    }
}
