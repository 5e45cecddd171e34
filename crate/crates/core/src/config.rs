//! Scenario configuration: one TOML document drives a whole run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::csc::{ControllerConfig, ScenarioKind};
use crate::devices::DeviceConfig;
use crate::grid::{load_topology, GridModel, TopologyConfig};
use crate::profile::{ProfileSet, ScenarioProfile};
use crate::replication::LinkConfig;
use crate::thermal::{CresConfig, DhnConfig};

pub const MIN_EXCHANGE_RATE_HZ: f64 = 1.0;
pub const MAX_EXCHANGE_RATE_HZ: f64 = 2.0;

#[derive(Debug, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// Link impairments shared by every node⇄cloud connection. The period is
/// derived from the exchange rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkSettings {
    pub latency_ms: u64,
    pub jitter_ms: u64,
    pub drop_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeploymentMode {
    #[default]
    InProcess,
    MultiProcess,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DeploymentConfig {
    pub mode: DeploymentMode,
    /// `host:port` of the cloud node process.
    pub cloud: Option<String>,
    /// Namespace → `host:port` of each RI process.
    pub endpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermalConfig {
    pub dhn: DhnConfig,
    pub cres: CresConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Defaults to 960 s (overvoltage) or 1680 s (undervoltage).
    pub duration_s: Option<f64>,
    pub dt_s: f64,
    pub exchange_rate_hz: f64,
    pub staleness_horizon_ms: i64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub topology_file: Option<PathBuf>,
    pub profiles_file: Option<PathBuf>,
    pub link: LinkSettings,
    pub devices: DeviceConfig,
    pub controller: ControllerConfig,
    pub thermal: ThermalConfig,
    pub deployment: DeploymentConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Overvoltage,
            duration_s: None,
            dt_s: 0.5,
            exchange_rate_hz: 2.0,
            staleness_horizon_ms: 2000,
            seed: 1,
            out_dir: PathBuf::from("out"),
            topology_file: None,
            profiles_file: None,
            link: LinkSettings::default(),
            devices: DeviceConfig::default(),
            controller: ControllerConfig::default(),
            thermal: ThermalConfig::default(),
            deployment: DeploymentConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn for_kind(kind: ScenarioKind) -> Self {
        Self { kind, ..Default::default() }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new(e.to_string()))
    }

    /// Parse a file; relative topology/profile paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.topology_file, &mut cfg.profiles_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, without the deployment
    /// section and output directory: where a run executes and writes does
    /// not change what it computes.
    pub fn hash(&self) -> String {
        let scenario = Self {
            deployment: DeploymentConfig::default(),
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(scenario.to_toml().as_bytes()))
    }

    pub fn duration(&self) -> f64 {
        self.duration_s.unwrap_or_else(|| self.kind.default_duration_s())
    }

    pub fn dt_ms(&self) -> i64 {
        (self.dt_s * 1000.0).round() as i64
    }

    pub fn period_ms(&self) -> u64 {
        (1000.0 / self.exchange_rate_hz).round() as u64
    }

    /// Number of ticks; the record has one row per tick at `k·dt`.
    pub fn tick_count(&self) -> u64 {
        let n = self.duration() / self.dt_s;
        // absorb representation error in duration/dt
        (n + 1e-9).floor() as u64
    }

    pub fn time_ms(&self, tick: u64) -> i64 {
        tick as i64 * self.dt_ms()
    }

    /// Ticks at which a replication/control cycle runs: the first tick, and
    /// every tick that enters a new exchange period.
    pub fn is_exchange_tick(&self, tick: u64) -> bool {
        let period = |k: u64| ((self.time_ms(k) as f64) * self.exchange_rate_hz / 1000.0 + 1e-9).floor();
        tick == 0 || period(tick) > period(tick - 1)
    }

    pub fn link_config(&self, seed: u64) -> LinkConfig {
        LinkConfig {
            period_ms: self.period_ms(),
            latency_ms: self.link.latency_ms,
            jitter_ms: self.link.jitter_ms,
            drop_probability: self.link.drop_probability,
            seed,
        }
    }

    pub fn topology(&self) -> Result<GridModel, ConfigError> {
        let topo = match &self.topology_file {
            Some(p) => TopologyConfig::load(p).map_err(|e| ConfigError::new(e.to_string()))?,
            None => TopologyConfig::shipped(),
        };
        load_topology(&topo).map_err(|e| ConfigError::new(e.to_string()))
    }

    pub fn profile(&self) -> Result<ScenarioProfile, ConfigError> {
        let set = match &self.profiles_file {
            Some(p) => ProfileSet::load(p).map_err(|e| ConfigError::new(e.to_string()))?,
            None => ProfileSet::shipped(),
        };
        Ok(match self.kind {
            ScenarioKind::Overvoltage => set.overvoltage,
            ScenarioKind::Undervoltage => set.undervoltage,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let rate = self.exchange_rate_hz;
        if !(MIN_EXCHANGE_RATE_HZ..=MAX_EXCHANGE_RATE_HZ).contains(&rate) {
            return Err(ConfigError::new(format!("exchange rate {rate} Hz outside [1, 2]")));
        }
        if !(self.dt_s > 0.0) || self.dt_s > 1.0 / rate + 1e-12 {
            return Err(ConfigError::new(format!(
                "tick {} s must be positive and at most the exchange period",
                self.dt_s
            )));
        }
        if self.dt_ms() as f64 != self.dt_s * 1000.0 {
            return Err(ConfigError::new("tick must be a whole number of milliseconds"));
        }
        if !(self.duration() >= 0.0) || !self.duration().is_finite() {
            return Err(ConfigError::new("duration must be non-negative"));
        }
        if self.staleness_horizon_ms <= 0 {
            return Err(ConfigError::new("staleness horizon must be positive"));
        }
        self.link_config(self.seed)
            .validate()
            .map_err(|e| ConfigError::new(e.to_string()))?;
        self.controller
            .band(self.kind)
            .map_err(|e| ConfigError::new(e.to_string()))?;
        if !(self.devices.bess_capacity_kwh > 0.0) {
            return Err(ConfigError::new("battery capacity must be positive"));
        }
        let model = self.topology()?;
        for pcc in ["PCC2", "PCC4"] {
            if model.pcc_bus(pcc).is_none() {
                return Err(ConfigError::new(format!("topology lacks {pcc}")));
            }
        }
        for dev in ["SIN", "RSE"] {
            if model.device_bus(dev).is_none() {
                return Err(ConfigError::new(format!("topology does not attach {dev}")));
            }
        }
        self.profile()?
            .validate(&model)
            .map_err(|e| ConfigError::new(e.to_string()))?;
        crate::thermal::DistrictHeating::new(&self.thermal.dhn).map_err(|e| ConfigError::new(e.to_string()))?;
        if self.deployment.mode == DeploymentMode::MultiProcess && self.deployment.cloud.is_none() {
            tracing::debug!("multi-process run without fixed endpoints; ports are assigned at launch");
        }
        Ok(())
    }
}
