//! TOML configuration covering every module's tunables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::FaultConfig;
use crate::harness::HarnessConfig;
use crate::labeler::LabelConfig;
use crate::planner::PlannerConfig;
use crate::policy::{PolicyConfig, TrainConfig};
use crate::sim::SimConfig;
use crate::value::ValueConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    pub planner: PlannerConfig,
    pub errors: FaultConfig,
    pub value: ValueConfig,
    pub labeler: LabelConfig,
    pub policy: PolicyConfig,
    /// Imitation phase (baseline and recovery-aware).
    pub train: TrainConfig,
    /// Value-conditioned fine-tuning phase.
    pub vcr: TrainConfig,
    pub harness: HarnessConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            planner: PlannerConfig::default(),
            errors: FaultConfig::default(),
            value: ValueConfig::default(),
            labeler: LabelConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig {
                steps: 10_000,
                ..TrainConfig::default()
            },
            vcr: TrainConfig {
                steps: 10_000,
                ..TrainConfig::default()
            },
            harness: HarnessConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.errors.validate()?;
        self.labeler.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        self.vcr.validate()?;
        self.harness.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Reseeds every stochastic component from one base seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.value.seed = seed;
        self.policy.seed = seed;
        self.train.seed = seed;
        self.vcr.seed = seed.wrapping_add(1);
        self.harness.train_seed_base = seed.wrapping_mul(10_000_000);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = Config::from_toml("[labeler]\nalpha = 10.0\n[harness]\ntrials = 7\n").unwrap();
        assert_eq!(cfg.labeler.alpha, 10.0);
        assert_eq!(cfg.harness.trials, 7);
        assert_eq!(cfg.policy, PolicyConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(Config::from_toml("[bogus]\nx = 1\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[labeler]\nalpha = -1.0\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[train]\nsigma = 0.0\n"), Err(Error::Config(_))));
    }
}
