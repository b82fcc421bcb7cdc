//! Run configuration: one JSON document, every field defaulted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::PolarityConvention;
use crate::objective::{PatchParams, Weights};
use crate::solver::SolverConfig;
use crate::sync::SyncConfig;
use crate::synth::SimOptions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnrConfig {
    pub kernel: usize,
    pub epsilon: f64,
}

impl Default for SnrConfig {
    fn default() -> Self {
        Self {
            kernel: 5,
            epsilon: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventConfig {
    pub polarity: PolarityConvention,
    pub voxel_bins: usize,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            polarity: PolarityConvention::Auto,
            voxel_bins: 5,
        }
    }
}

/// Parameters of the classical illumination estimate used when no map is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlluminationConfig {
    pub sigma: f64,
    pub target: f64,
}

impl Default for IlluminationConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            target: 0.5,
        }
    }
}

/// Gaussian noise applied to the initial state before optimizing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub sigma_log_depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub weights: Weights,
    pub solver: SolverConfig,
    pub patches: PatchParams,
    pub snr: SnrConfig,
    pub events: EventConfig,
    pub illumination: IlluminationConfig,
    pub sync: SyncConfig,
    pub simulation: SimOptions,
    pub perturb: PerturbConfig,
}

impl Config {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(s).map_err(|e| Error::Json {
            path: "<config>".into(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.solver.validate()?;
        if self.snr.kernel.is_multiple_of(2) {
            return Err(Error::schema("snr.kernel", "must be odd"));
        }
        if !(self.snr.epsilon > 0.0) {
            return Err(Error::schema("snr.epsilon", "must be positive"));
        }
        if self.events.voxel_bins == 0 {
            return Err(Error::schema("events.voxel_bins", "must be >= 1"));
        }
        if !(self.patches.max_motion_spread >= 0.0) {
            return Err(Error::schema("patches.max_motion_spread", "must be >= 0"));
        }
        if !(self.illumination.sigma > 0.0 && self.illumination.target > 0.0) {
            return Err(Error::schema("illumination", "sigma and target must be positive"));
        }
        if !(self.simulation.quantum_divisor > 0.0) {
            return Err(Error::schema("simulation.quantum_divisor", "must be positive"));
        }
        let p = &self.perturb;
        if [p.sigma_rot, p.sigma_trans, p.sigma_log_depth].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::schema("perturb", "noise levels must be >= 0"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
