//! Domain types shared by every other module.
//!
//! Powers are stored in watts throughout; dBm only appears at the config and
//! CLI boundary through [`dbm_to_watts`] / [`watts_to_dbm`].

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::csma::BackoffLadder;

/// Converts a power level in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Converts a power level in watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Static description of the small-cell network: topology, band, power
/// budgets, amplifier inefficiency and the contention ladders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of small base stations `K`.
    pub num_sbs: usize,
    /// Users served by each SBS; `users_per_sbs.len() == num_sbs`.
    pub users_per_sbs: Vec<usize>,
    /// Licensed OFDM subcarriers `L`, shared with the macrocell.
    pub licensed_subcarriers: usize,
    /// Unlicensed OFDM subcarriers `W` on each SBS's own channel.
    pub unlicensed_subcarriers: usize,
    /// Subcarrier bandwidth `B` in Hz.
    pub subcarrier_bandwidth: f64,
    /// Noise power `σ²` in W.
    pub noise_power: f64,
    pub total_power_cap: f64,
    pub unlicensed_power_cap: f64,
    /// Cross-tier interference cap `I_M` at the macro user, in W.
    pub interference_cap: f64,
    /// Amplifier coefficient `ξ_c ≥ 1` (inverse drain efficiency).
    pub amplifier_coeff_licensed: f64,
    pub amplifier_coeff_unlicensed: f64,
    pub static_power: f64,
    /// Stored and reported, but not part of the consumed power.
    pub idle_power: f64,
    /// Slot length in seconds.
    pub slot_length: f64,
    pub wifi_backoff: BackoffLadder,
    pub sbs_backoff: BackoffLadder,
    /// Lyapunov control parameter `V`.
    pub control_param: f64,
    /// Binary-relaxation penalty `μ`; `None` selects the adaptive default.
    pub dc_penalty: Option<f64>,
    /// Big-M coupling constant `Λ` in `p ≤ xΛ`.
    pub big_m: f64,
}

impl NetworkConfig {
    pub fn dims(&self) -> Dims {
        Dims::new(
            self.users_per_sbs.clone(),
            self.licensed_subcarriers,
            self.unlicensed_subcarriers,
        )
    }

    /// Per-slot consumed power when nothing is transmitted.
    pub fn static_floor(&self) -> f64 {
        self.num_sbs as f64 * self.static_power
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> ValidationReport {
        validate_config(self)
    }
}

/// One violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.violations.push(Violation { field, message: message.into() });
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "valid");
        }
        writeln!(f, "invalid ({} violations)", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

/// Lists every violated invariant of `cfg`; the report is empty iff the
/// configuration is admissible.
pub fn validate_config(cfg: &NetworkConfig) -> ValidationReport {
    let mut report = ValidationReport::default();

    if cfg.num_sbs == 0 {
        report.push("num_sbs", "at least one SBS is required");
    }
    if cfg.users_per_sbs.len() != cfg.num_sbs {
        report.push(
            "users_per_sbs",
            format!(
                "{} user counts given for {} SBSs",
                cfg.users_per_sbs.len(),
                cfg.num_sbs
            ),
        );
    }
    if cfg.users_per_sbs.iter().any(|&s| s == 0) {
        report.push("users_per_sbs", "every SBS needs at least one user");
    }
    if cfg.licensed_subcarriers + cfg.unlicensed_subcarriers == 0 {
        report.push("subcarriers", "no licensed or unlicensed subcarriers");
    }

    let positive: [(&'static str, f64); 7] = [
        ("subcarrier_bandwidth", cfg.subcarrier_bandwidth),
        ("noise_power", cfg.noise_power),
        ("total_power_cap", cfg.total_power_cap),
        ("unlicensed_power_cap", cfg.unlicensed_power_cap),
        ("interference_cap", cfg.interference_cap),
        ("slot_length", cfg.slot_length),
        ("static_power", cfg.static_power),
    ];
    for (field, value) in positive {
        if !(value.is_finite() && value > 0.0) {
            report.push(field, format!("must be finite and > 0, got {value}"));
        }
    }
    if !(cfg.idle_power.is_finite() && cfg.idle_power >= 0.0) {
        report.push("idle_power", format!("must be ≥ 0, got {}", cfg.idle_power));
    }

    if cfg.unlicensed_power_cap > cfg.total_power_cap {
        report.push(
            "unlicensed_power_cap",
            format!(
                "P_u > P_total ({} W > {} W)",
                cfg.unlicensed_power_cap, cfg.total_power_cap
            ),
        );
    }
    for (field, xi) in [
        ("amplifier_coeff_licensed", cfg.amplifier_coeff_licensed),
        ("amplifier_coeff_unlicensed", cfg.amplifier_coeff_unlicensed),
    ] {
        if !(xi.is_finite() && xi >= 1.0) {
            report.push(field, format!("amplifier coefficient must be ≥ 1, got {xi}"));
        }
    }
    if !(cfg.big_m >= cfg.total_power_cap) {
        report.push(
            "big_m",
            format!(
                "big_m below power cap ({} W < {} W)",
                cfg.big_m, cfg.total_power_cap
            ),
        );
    }
    if !(cfg.control_param.is_finite() && cfg.control_param >= 0.0) {
        report.push("control_param", format!("V must be ≥ 0, got {}", cfg.control_param));
    }
    if let Some(mu) = cfg.dc_penalty {
        if !(mu.is_finite() && mu > 0.0) {
            report.push("dc_penalty", format!("μ must be > 0, got {mu}"));
        }
    }
    for (field, ladder) in [("wifi_backoff", &cfg.wifi_backoff), ("sbs_backoff", &cfg.sbs_backoff)] {
        if let Err(e) = ladder.check() {
            report.push(field, e.to_string());
        }
    }
    report
}

/// Index bookkeeping for users and subcarriers.
///
/// Users are numbered globally, SBS by SBS; per-band variables are laid out
/// subcarrier-major: `index = subcarrier * num_users + user`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims {
    users_per_sbs: Vec<usize>,
    offsets: Vec<usize>,
    sbs_of_user: Vec<usize>,
    pub licensed: usize,
    pub unlicensed: usize,
}

impl Dims {
    pub fn new(users_per_sbs: Vec<usize>, licensed: usize, unlicensed: usize) -> Self {
        let mut offsets = Vec::with_capacity(users_per_sbs.len() + 1);
        let mut sbs_of_user = Vec::new();
        let mut acc = 0;
        for (k, &s) in users_per_sbs.iter().enumerate() {
            offsets.push(acc);
            acc += s;
            sbs_of_user.extend(std::iter::repeat(k).take(s));
        }
        offsets.push(acc);
        Self { users_per_sbs, offsets, sbs_of_user, licensed, unlicensed }
    }

    pub fn num_sbs(&self) -> usize {
        self.users_per_sbs.len()
    }

    pub fn num_users(&self) -> usize {
        self.sbs_of_user.len()
    }

    pub fn users_of(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn sbs_of(&self, user: usize) -> usize {
        self.sbs_of_user[user]
    }

    pub fn licensed_len(&self) -> usize {
        self.licensed * self.num_users()
    }

    pub fn unlicensed_len(&self) -> usize {
        self.unlicensed * self.num_users()
    }

    pub fn lic(&self, l: usize, user: usize) -> usize {
        l * self.num_users() + user
    }

    pub fn unl(&self, w: usize, user: usize) -> usize {
        w * self.num_users() + user
    }

    /// Index into [`SlotState::licensed_gain`].
    pub fn lic_gain(&self, l: usize, from_sbs: usize, user: usize) -> usize {
        (l * self.num_sbs() + from_sbs) * self.num_users() + user
    }

    /// Index into [`SlotState::macro_gain`].
    pub fn macro_gain(&self, l: usize, from_sbs: usize) -> usize {
        l * self.num_sbs() + from_sbs
    }
}

/// Per-slot realization of the random environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub t: u64,
    /// Gain from SBS `j` to user `u` on licensed subcarrier `l`
    /// (see [`Dims::lic_gain`]); own-link gains are the `j == sbs_of(u)` entries.
    pub licensed_gain: Vec<f64>,
    /// Gain from SBS `j` to the macrocell user on licensed subcarrier `l`.
    pub macro_gain: Vec<f64>,
    /// Own-link gain to user `u` on unlicensed subcarrier `w`.
    pub unlicensed_gain: Vec<f64>,
    /// Bits arriving for each user during this slot.
    pub arrivals: Vec<f64>,
    /// Wi-Fi nodes contending on each SBS's unlicensed channel.
    pub wifi_count: Vec<usize>,
}

impl SlotState {
    /// A deterministic state with every gain equal to `gain`, no arrivals and
    /// no Wi-Fi nodes. Mostly useful for tests and examples.
    pub fn uniform(dims: &Dims, gain: f64) -> Self {
        Self {
            t: 0,
            licensed_gain: vec![gain; dims.licensed * dims.num_sbs() * dims.num_users()],
            macro_gain: vec![gain; dims.licensed * dims.num_sbs()],
            unlicensed_gain: vec![gain; dims.unlicensed_len()],
            arrivals: vec![0.0; dims.num_users()],
            wifi_count: vec![0; dims.num_sbs()],
        }
    }

    pub fn own_licensed_gain(&self, dims: &Dims, l: usize, user: usize) -> f64 {
        self.licensed_gain[dims.lic_gain(l, dims.sbs_of(user), user)]
    }
}

/// Per-user backlog in bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueVector(pub Vec<f64>);

impl QueueVector {
    pub fn zeros(users: usize) -> Self {
        Self(vec![0.0; users])
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.total() / self.0.len() as f64
        }
    }
}

/// Subcarrier assignment indicators and transmit powers for both bands.
///
/// Inside the solver the indicators are relaxed to `[0, 1]`; allocations
/// leaving the scheduler are binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub x_licensed: Vec<f64>,
    pub p_licensed: Vec<f64>,
    pub x_unlicensed: Vec<f64>,
    pub p_unlicensed: Vec<f64>,
}

impl Allocation {
    pub fn zero(dims: &Dims) -> Self {
        Self {
            x_licensed: vec![0.0; dims.licensed_len()],
            p_licensed: vec![0.0; dims.licensed_len()],
            x_unlicensed: vec![0.0; dims.unlicensed_len()],
            p_unlicensed: vec![0.0; dims.unlicensed_len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.x_licensed
            .iter()
            .chain(&self.p_licensed)
            .chain(&self.x_unlicensed)
            .chain(&self.p_unlicensed)
            .all(|&v| v == 0.0)
    }

    /// `Σ (x − x²)` over every indicator; zero iff all are binary.
    pub fn binary_residual(&self) -> f64 {
        self.x_licensed
            .iter()
            .chain(&self.x_unlicensed)
            .map(|&x| x - x * x)
            .sum()
    }

    /// Transmit power of SBS `k` on the licensed band (`Σ x·p`).
    pub fn licensed_power(&self, dims: &Dims, k: usize) -> f64 {
        (0..dims.licensed)
            .flat_map(|l| dims.users_of(k).map(move |u| dims.lic(l, u)))
            .map(|i| self.x_licensed[i] * self.p_licensed[i])
            .sum()
    }

    pub fn unlicensed_power(&self, dims: &Dims, k: usize) -> f64 {
        (0..dims.unlicensed)
            .flat_map(|w| dims.users_of(k).map(move |u| dims.unl(w, u)))
            .map(|i| self.x_unlicensed[i] * self.p_unlicensed[i])
            .sum()
    }
}
