//! Shannon rates, cross-tier interference and power consumption for a given
//! allocation and slot realization.

use serde::Serialize;

use crate::model::{Allocation, Dims, NetworkConfig, SlotState};

/// SNR below which a link is treated as silent.
pub const SNR_FLOOR: f64 = 1e-15;

fn log2_1p(snr: f64) -> f64 {
    if snr < SNR_FLOOR {
        0.0
    } else {
        snr.ln_1p() / std::f64::consts::LN_2
    }
}

/// Interference at `user` on licensed subcarrier `l` from every other SBS.
pub fn licensed_interference(alloc: &Allocation, state: &SlotState, dims: &Dims, l: usize, user: usize) -> f64 {
    let own = dims.sbs_of(user);
    let mut total = 0.0;
    for j in (0..dims.num_sbs()).filter(|&j| j != own) {
        let g = state.licensed_gain[dims.lic_gain(l, j, user)];
        for other in dims.users_of(j) {
            let i = dims.lic(l, other);
            total += alloc.x_licensed[i] * alloc.p_licensed[i] * g;
        }
    }
    total
}

/// Achievable rate (bit/s) of `user` on licensed subcarrier `l`.
pub fn licensed_rate(alloc: &Allocation, state: &SlotState, cfg: &NetworkConfig, l: usize, user: usize) -> f64 {
    let dims = cfg.dims();
    licensed_rate_in(alloc, state, cfg, &dims, l, user)
}

fn licensed_rate_in(
    alloc: &Allocation,
    state: &SlotState,
    cfg: &NetworkConfig,
    dims: &Dims,
    l: usize,
    user: usize,
) -> f64 {
    let i = dims.lic(l, user);
    let signal = alloc.x_licensed[i] * alloc.p_licensed[i] * state.own_licensed_gain(dims, l, user);
    if signal <= 0.0 {
        return 0.0;
    }
    let interference = licensed_interference(alloc, state, dims, l, user);
    cfg.subcarrier_bandwidth * log2_1p(signal / (interference + cfg.noise_power))
}

/// Achievable rate (bit/s) of `user` on unlicensed subcarrier `w`, scaled by
/// the airtime share `p_suc` won by its SBS.
pub fn unlicensed_rate(
    alloc: &Allocation,
    state: &SlotState,
    cfg: &NetworkConfig,
    p_suc: f64,
    w: usize,
    user: usize,
) -> f64 {
    let dims = cfg.dims();
    unlicensed_rate_in(alloc, state, cfg, &dims, p_suc, w, user)
}

fn unlicensed_rate_in(
    alloc: &Allocation,
    state: &SlotState,
    cfg: &NetworkConfig,
    dims: &Dims,
    p_suc: f64,
    w: usize,
    user: usize,
) -> f64 {
    let i = dims.unl(w, user);
    let snr = alloc.x_unlicensed[i] * alloc.p_unlicensed[i] * state.unlicensed_gain[i] / cfg.noise_power;
    p_suc * cfg.subcarrier_bandwidth * log2_1p(snr)
}

/// Aggregate interference (W) all SBSs impose on the macrocell user on `l`.
pub fn cross_tier_interference(alloc: &Allocation, state: &SlotState, dims: &Dims, l: usize) -> f64 {
    (0..dims.num_sbs())
        .map(|k| {
            let g = state.macro_gain[dims.macro_gain(l, k)];
            dims.users_of(k)
                .map(|u| {
                    let i = dims.lic(l, u);
                    alloc.x_licensed[i] * alloc.p_licensed[i] * g
                })
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerBreakdown {
    /// Consumed licensed-band power per SBS, `ξ_c · Σ x·p`.
    pub licensed: Vec<f64>,
    pub unlicensed: Vec<f64>,
    /// `Σ_k (PC_static + PC_c + PC_u)`.
    pub total: f64,
}

pub fn power_consumption(alloc: &Allocation, cfg: &NetworkConfig) -> PowerBreakdown {
    let dims = cfg.dims();
    let licensed: Vec<f64> = (0..dims.num_sbs())
        .map(|k| cfg.amplifier_coeff_licensed * alloc.licensed_power(&dims, k))
        .collect();
    let unlicensed: Vec<f64> = (0..dims.num_sbs())
        .map(|k| cfg.amplifier_coeff_unlicensed * alloc.unlicensed_power(&dims, k))
        .collect();
    let total = licensed
        .iter()
        .zip(&unlicensed)
        .map(|(c, u)| cfg.static_power + c + u)
        .sum();
    PowerBreakdown { licensed, unlicensed, total }
}

/// Every rate and power figure of one slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatePowerBreakdown {
    /// Per-user rate (bit/s), licensed plus unlicensed.
    pub user_rates: Vec<f64>,
    /// Per-SBS licensed rate (bit/s).
    pub licensed_rates: Vec<f64>,
    pub unlicensed_rates: Vec<f64>,
    pub power: PowerBreakdown,
    pub total_rate: f64,
}

impl RatePowerBreakdown {
    pub fn total_power(&self) -> f64 {
        self.power.total
    }

    /// Per-user bits served within one slot of `slot_length` seconds.
    pub fn user_bits(&self, slot_length: f64) -> Vec<f64> {
        self.user_rates.iter().map(|r| r * slot_length).collect()
    }
}

/// Fills in all rates and powers; `success_probs[k]` is SBS `k`'s airtime
/// share on its unlicensed channel.
pub fn aggregate(
    alloc: &Allocation,
    state: &SlotState,
    cfg: &NetworkConfig,
    success_probs: &[f64],
) -> RatePowerBreakdown {
    let dims = cfg.dims();
    let mut user_rates = vec![0.0; dims.num_users()];
    let mut licensed_rates = vec![0.0; dims.num_sbs()];
    let mut unlicensed_rates = vec![0.0; dims.num_sbs()];
    for (u, rate) in user_rates.iter_mut().enumerate() {
        let k = dims.sbs_of(u);
        let lic: f64 = (0..dims.licensed)
            .map(|l| licensed_rate_in(alloc, state, cfg, &dims, l, u))
            .sum();
        let unl: f64 = (0..dims.unlicensed)
            .map(|w| unlicensed_rate_in(alloc, state, cfg, &dims, success_probs[k], w, u))
            .sum();
        licensed_rates[k] += lic;
        unlicensed_rates[k] += unl;
        *rate = lic + unl;
    }
    let total_rate = user_rates.iter().sum();
    RatePowerBreakdown {
        user_rates,
        licensed_rates,
        unlicensed_rates,
        power: power_consumption(alloc, cfg),
        total_rate,
    }
}

/// A violated allocation constraint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationViolation {
    pub constraint: &'static str,
    pub detail: String,
    pub amount: f64,
}

/// Checks an allocation against the per-slot constraints: the total and
/// unlicensed power budgets, the interference cap, single-user subcarriers,
/// non-negative powers, binary indicators and the big-M coupling.
pub fn check_allocation(
    alloc: &Allocation,
    state: &SlotState,
    cfg: &NetworkConfig,
    tol: f64,
) -> Vec<AllocationViolation> {
    let dims = cfg.dims();
    let mut out = Vec::new();
    let mut flag = |constraint, detail: String, amount: f64| {
        if amount > tol {
            out.push(AllocationViolation { constraint, detail, amount });
        }
    };
    for k in 0..dims.num_sbs() {
        let lic = alloc.licensed_power(&dims, k);
        let unl = alloc.unlicensed_power(&dims, k);
        flag("total power", format!("SBS {k}"), lic + unl - cfg.total_power_cap);
        flag("unlicensed power", format!("SBS {k}"), unl - cfg.unlicensed_power_cap);
        for l in 0..dims.licensed {
            let used: f64 = dims.users_of(k).map(|u| alloc.x_licensed[dims.lic(l, u)]).sum();
            flag("single user", format!("SBS {k} licensed {l}"), used - 1.0);
        }
        for w in 0..dims.unlicensed {
            let used: f64 = dims.users_of(k).map(|u| alloc.x_unlicensed[dims.unl(w, u)]).sum();
            flag("single user", format!("SBS {k} unlicensed {w}"), used - 1.0);
        }
    }
    for l in 0..dims.licensed {
        flag(
            "interference cap",
            format!("licensed {l}"),
            cross_tier_interference(alloc, state, &dims, l) - cfg.interference_cap,
        );
    }
    for (band, xs, ps) in [
        ("licensed", &alloc.x_licensed, &alloc.p_licensed),
        ("unlicensed", &alloc.x_unlicensed, &alloc.p_unlicensed),
    ] {
        for (i, (&x, &p)) in xs.iter().zip(ps.iter()).enumerate() {
            flag("non-negative power", format!("{band} {i}"), -p);
            flag("binary indicator", format!("{band} {i}"), x.min(1.0 - x).abs());
            flag("big-M coupling", format!("{band} {i}"), p - x * cfg.big_m);
        }
    }
    out
}
