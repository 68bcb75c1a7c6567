//! Experiment configuration: network, environment, scheduler and run
//! settings, loaded from TOML layered over the built-in defaults.
//!
//! Power-valued network keys may be given in dBm with a `_dbm` suffix
//! (`total_power_cap_dbm = 46`). Amplifier coefficients may be given as a
//! drain efficiency (`amplifier_efficiency_licensed = 0.35`). Backoff ladders
//! are either a list of mean backoff slots per stage or
//! `{ cw_min = 16, max_retx = 5 }`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

use crate::csma::BackoffLadder;
use crate::env::EnvParams;
use crate::model::{dbm_to_watts, NetworkConfig, ValidationReport};
use crate::scheduler::ScaSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid network parameters:\n{0}")]
    Invalid(ValidationReport),
    #[error("invalid environment parameters: {0}")]
    Env(String),
}

/// Horizon, control-parameter sweep and stability threshold of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub slots: usize,
    pub v_list: Vec<f64>,
    /// Tail-slope threshold for stability, as a fraction of the mean
    /// per-user arrival (bits per slot).
    pub slope_tolerance: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { slots: 5000, v_list: vec![1.0, 2.0, 5.0, 10.0, 20.0, 40.0], slope_tolerance: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub env: EnvParams,
    pub scheduler: ScaSettings,
    pub run: RunSettings,
}

impl ExperimentConfig {
    /// Absolute tail-slope threshold in bits per slot.
    pub fn eps_slope(&self) -> f64 {
        self.run.slope_tolerance * self.env.mean_arrival_bits()
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let report = self.network.validate();
        if !report.is_valid() {
            return Err(ConfigError::Invalid(report));
        }
        self.env.check().map_err(ConfigError::Env)
    }
}

/// Network defaults: the published simulation constants plus assumed values
/// for what the evaluation leaves unstated (see `configs/paper_defaults.toml`).
pub fn default_network() -> NetworkConfig {
    let total = dbm_to_watts(46.0);
    NetworkConfig {
        num_sbs: 3,
        users_per_sbs: vec![1; 3],
        licensed_subcarriers: 2,
        unlicensed_subcarriers: 4,
        subcarrier_bandwidth: 20e6,
        noise_power: 1e-11,
        total_power_cap: total,
        unlicensed_power_cap: dbm_to_watts(23.0),
        interference_cap: 1e-10,
        amplifier_coeff_licensed: 1.0 / 0.35,
        amplifier_coeff_unlicensed: 1.0 / 0.35,
        static_power: 9.0,
        idle_power: 1.0,
        slot_length: 0.01,
        wifi_backoff: BackoffLadder::default(),
        sbs_backoff: BackoffLadder::default(),
        control_param: 5.0,
        dc_penalty: None,
        big_m: total,
    }
}

pub fn paper_defaults() -> ExperimentConfig {
    ExperimentConfig {
        network: default_network(),
        env: EnvParams::default(),
        scheduler: ScaSettings::default(),
        run: RunSettings::default(),
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse(&text)
}

/// Parses TOML text; absent keys keep their defaults. The result is checked.
pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let user: Value = text.parse::<toml::Table>().map(Value::Table).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut merged = Value::try_from(paper_defaults()).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut user = user;
    if let Some(net) = user.get_mut("network").and_then(Value::as_table_mut) {
        normalize_network(net)?;
    }
    merge(&mut merged, user);
    let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

const POWER_KEYS: [&str; 6] =
    ["noise_power", "total_power_cap", "unlicensed_power_cap", "interference_cap", "static_power", "idle_power"];

fn as_f64(v: &Value, key: &str) -> Result<f64, ConfigError> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| ConfigError::Parse(format!("`{key}` must be a number")))
}

/// Rewrites the alternative spellings of network keys into canonical ones.
fn normalize_network(net: &mut toml::Table) -> Result<(), ConfigError> {
    for key in POWER_KEYS.iter().copied().chain(["big_m"]) {
        let dbm_key = format!("{key}_dbm");
        if let Some(v) = net.remove(&dbm_key) {
            if net.contains_key(key) {
                return Err(ConfigError::Parse(format!("both `{key}` and `{dbm_key}` given")));
            }
            net.insert(key.into(), Value::Float(dbm_to_watts(as_f64(&v, &dbm_key)?)));
        }
    }
    for band in ["licensed", "unlicensed"] {
        let eff_key = format!("amplifier_efficiency_{band}");
        let coeff_key = format!("amplifier_coeff_{band}");
        if let Some(v) = net.remove(&eff_key) {
            if net.contains_key(&coeff_key) {
                return Err(ConfigError::Parse(format!("both `{coeff_key}` and `{eff_key}` given")));
            }
            let eff = as_f64(&v, &eff_key)?;
            if !(eff > 0.0) {
                return Err(ConfigError::Parse(format!("`{eff_key}` must be > 0")));
            }
            net.insert(coeff_key, Value::Float(1.0 / eff));
        }
    }
    for key in ["wifi_backoff", "sbs_backoff"] {
        if let Some(Value::Table(t)) = net.get(key) {
            let cw = t.get("cw_min").ok_or_else(|| ConfigError::Parse(format!("`{key}.cw_min` missing")))?;
            let retx = t
                .get("max_retx")
                .and_then(Value::as_integer)
                .filter(|&r| r >= 1)
                .ok_or_else(|| ConfigError::Parse(format!("`{key}.max_retx` must be an integer ≥ 1")))?;
            let ladder = BackoffLadder::binary_exponential(as_f64(cw, key)?, retx as usize);
            let list = ladder.mean_backoffs().iter().map(|&b| Value::Float(b)).collect();
            net.insert(key.into(), Value::Array(list));
        }
    }
    // Scalars given as integers deserialize into f64 fields via serde's
    // integer-to-float path only for some formats; make them floats here.
    let float_keys = POWER_KEYS.iter().copied().chain([
        "subcarrier_bandwidth",
        "amplifier_coeff_licensed",
        "amplifier_coeff_unlicensed",
        "slot_length",
        "control_param",
        "dc_penalty",
        "big_m",
    ]);
    for key in float_keys {
        if let Some(Value::Integer(i)) = net.get(key) {
            let f = *i as f64;
            net.insert(key.into(), Value::Float(f));
        }
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
