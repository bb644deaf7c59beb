//! Run configuration, stored as TOML.
//!
//! Every section is optional and falls back to its defaults:
//!
//! ```toml
//! output_dir = "runs/demo"
//! seeds = [0, 1, 2]
//!
//! [scenario]
//! n_vehicles = 4
//! perturbation = { kind = "decel-accel", start_s = 20.0, depth = 0.6, duration_s = 10.0 }
//!
//! [train]
//! total_steps = 100000
//! obs_mode = "ia2c"
//! consensus = { protocol = "bdc", epsilon = 0.01 }
//!
//! [energy]
//! model = "poly"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consensus::NeighborGraph;
use crate::env::{LeaderMode, RewardWeights, ScenarioConfig};
use crate::error::{Error, Result};
use crate::ovm::OvmParams;
use crate::train::{Experiment, TrainConfig};
use crate::vehicle::{fit_energy_poly, EnergyModel, GridSpec, VehicleParams};

pub const OUTPUT_DIR_ENV: &str = "CACC_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "cacc-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergySource {
    /// Fitted polynomial surrogate.
    Poly,
    /// Force-balance model evaluated directly.
    Physics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub model: EnergySource,
    pub grid: GridSpec,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            model: EnergySource::Poly,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub reward: RewardWeights,
    pub vehicle: VehicleParams,
    pub ovm: OvmParams,
    pub energy: EnergyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            seeds: vec![0, 1, 2],
            scenario: ScenarioConfig::default(),
            train: TrainConfig::desk(),
            reward: RewardWeights::default(),
            vehicle: VehicleParams::default(),
            ovm: OvmParams::default(),
            energy: EnergyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config(path.display().to_string(), reason),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ovm.validate()?;
        self.scenario.validate(&self.ovm)?;
        self.reward.validate()?;
        self.vehicle.validate()?;
        self.train.validate()?;
        let agents = match self.scenario.leader_mode {
            LeaderMode::VirtualTarget => self.scenario.n_vehicles,
            LeaderMode::TraceReplay => self.scenario.n_vehicles - 1,
        };
        self.train.consensus.validate(&NeighborGraph::line(agents))?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// Explicit setting, then `$CACC_OUTPUT_DIR`, then `./cacc-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn energy_model(&self) -> Result<EnergyModel> {
        Ok(match self.energy.model {
            EnergySource::Physics => EnergyModel::Physics(self.vehicle),
            EnergySource::Poly => EnergyModel::Poly(fit_energy_poly(&self.vehicle, self.energy.grid)?.poly),
        })
    }

    pub fn experiment(&self) -> Result<Experiment> {
        Ok(Experiment {
            scenario: self.scenario.clone(),
            reward: self.reward,
            ovm: self.ovm,
            energy: self.energy_model()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::Protocol;
    use crate::env::{ObsMode, Perturbation};

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig {
            output_dir: Some("x/y".into()),
            seeds: vec![4, 9],
            ..Default::default()
        };
        cfg.scenario.perturbation = Perturbation::None;
        cfg.scenario.leader_mode = LeaderMode::TraceReplay;
        cfg.train.obs_mode = ObsMode::Fprint;
        cfg.train.consensus.protocol = Protocol::Dcea;
        cfg.energy.model = EnergySource::Physics;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        let default_text = RunConfig::default().to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&default_text).unwrap(), RunConfig::default());
    }

    #[test]
    fn doc_example_parses() {
        let text = r#"
output_dir = "runs/demo"
seeds = [0, 1, 2]

[scenario]
n_vehicles = 4
perturbation = { kind = "decel-accel", start_s = 20.0, depth = 0.6, duration_s = 10.0 }

[train]
total_steps = 100000
obs_mode = "ia2c"
consensus = { protocol = "bdc", epsilon = 0.01 }

[energy]
model = "poly"
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.consensus.epsilon, 0.01);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_toml_str("[scenario]\nn_vehicle = 3\n").unwrap_err();
        assert!(err.to_string().contains("n_vehicle"), "{err}");
        let cfg = RunConfig::from_toml_str("[train]\ngamma = 1.5\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.is_config() && err.to_string().contains("train.gamma"), "{err}");
    }
}
