//! Experiment configuration: one TOML file with a section per subsystem.
//! Every field has a default, so a file only lists what it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mpc::MpcConfig;
use crate::net::NetConfig;
use crate::sim::episode::SliceOptions;
use crate::sim::expert::ExpertConfig;
use crate::sim::map::MapConfig;
use crate::sim::scenario::{derive_seed, generate_scenario, Scenario, ScenarioConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Expert episodes to generate.
    pub episodes: usize,
    /// Recorded frames between consecutive scenes of an episode.
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { episodes: 100, stride: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Closed-loop episodes.
    pub episodes: usize,
    /// Seed of the closed-loop scenarios, independent of the training data.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, seed: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub map: MapConfig,
    pub scenario: ScenarioConfig,
    pub expert: ExpertConfig,
    pub data: DataConfig,
    pub mpc: MpcConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        self.scenario.validate()?;
        self.expert.validate()?;
        self.mpc.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be >= 1".into()));
        }
        if (self.net.dt - self.scenario.record_dt()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "net.dt {} must equal the recording interval {} (scenario.dt * record_every)",
                self.net.dt,
                self.scenario.record_dt()
            )));
        }
        if self.mpc.horizon > self.net.horizon {
            return Err(Error::Config("mpc.horizon exceeds net.horizon".into()));
        }
        Ok(())
    }

    pub fn slice_options(&self) -> SliceOptions {
        SliceOptions {
            horizon: self.net.horizon,
            stride: self.data.stride,
            record_every: self.scenario.record_every,
            exit_radius: self.scenario.exit_radius,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    /// Closed-loop evaluation scenarios; episode `e` is drawn from
    /// `derive_seed(eval.seed, [e])`.
    pub fn eval_scenarios(&self) -> Result<Vec<Scenario>> {
        let scfg = ScenarioConfig {
            seed: self.eval.seed,
            ..self.scenario.clone()
        };
        (0..self.eval.episodes)
            .map(|e| generate_scenario(&scfg, derive_seed(self.eval.seed, &[e as u64])))
            .collect()
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(Sha256::digest(&json))
}
