//! Per-slot drift-plus-penalty scheduler.
//!
//! Each slot minimizes `V·PC_tot − Σ Q·R` over subcarrier indicators `x` and
//! powers `p`. The product `x·p` is replaced by the coupling `0 ≤ p ≤ x·Λ`, the
//! binary constraint by the penalty `μ Σ (x − x²)`, and each licensed rate
//! `log(1 + S/(I+σ²))` by `log(S+I+σ²) − log(I+σ²)`. The objective then
//! splits into a difference `f − g` of convex functions:
//!
//! ```text
//! f = V·PC_tot − Σ Q·c·log(S+I+σ²) − Σ Q·R_u + μ Σ x
//! g = −Σ Q·c·log(I+σ²) + μ Σ x²
//! ```
//!
//! Successive convex approximation linearizes `g` at the previous iterate and
//! solves the resulting convex problem with the barrier solver; each step
//! cannot increase `f − g`. Indicators are finally rounded, one user per
//! subcarrier is kept, and powers are re-optimized with `x` fixed.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Allocation, Dims, NetworkConfig, QueueVector, SlotState};
use crate::solver::{self, ConvexProblem, LinearRow, RowLabel, SmoothFunction, SolverError, SolverSettings};

/// Lyapunov function `½ Σ Q²`.
pub fn lyapunov_value(q: &QueueVector) -> f64 {
    0.5 * q.0.iter().map(|q| q * q).sum::<f64>()
}

/// Decision-dependent part of the drift-plus-penalty bound,
/// `V·PC_tot − Σ Q·R`. `queue` and `served` must share a unit.
pub fn drift_plus_penalty(v: f64, pc_tot: f64, queue: &[f64], served: &[f64]) -> f64 {
    v * pc_tot - queue.iter().zip(served).map(|(q, r)| q * r).sum::<f64>()
}

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("{got} slots of samples, at least {needed} required")]
    InsufficientSamples { got: usize, needed: usize },
}

pub const MIN_C0_SLOTS: usize = 1000;

/// Empirical `½ Σ_users (E[A²] + E[R²])` from per-slot, per-user samples.
pub fn bound_constant_c0(arrivals: &[Vec<f64>], served: &[Vec<f64>]) -> Result<f64, BoundError> {
    let slots = arrivals.len().min(served.len());
    if slots < MIN_C0_SLOTS {
        return Err(BoundError::InsufficientSamples { got: slots, needed: MIN_C0_SLOTS });
    }
    let users = arrivals[0].len();
    let mut total = 0.0;
    for u in 0..users {
        let a2: f64 = arrivals[..slots].iter().map(|a| a[u] * a[u]).sum::<f64>() / slots as f64;
        let r2: f64 = served[..slots].iter().map(|r| r[u] * r[u]).sum::<f64>() / slots as f64;
        total += a2 + r2;
    }
    Ok(0.5 * total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaSettings {
    pub max_outer_iters: usize,
    /// Relative change of the relaxed objective that stops the SCA loop.
    pub objective_tol: f64,
    pub rounding_threshold: f64,
    /// Fixed penalty `μ`; `None` derives it from `V`, the power cap and the
    /// queue weights.
    pub penalty: Option<f64>,
    pub restart_count: usize,
    pub max_penalty_doublings: usize,
    /// `Σ (x − x²)` above which the penalty is doubled.
    pub binary_tol: f64,
    /// Unit (bits) in which backlog and service enter the objective.
    pub queue_unit_bits: f64,
    /// Seed for restart points; mixed with the slot index.
    pub seed: u64,
    /// Initial barrier weight of every SCA subproblem after the first.
    pub warm_barrier: f64,
    pub solver: SolverSettings,
}

impl Default for ScaSettings {
    fn default() -> Self {
        Self {
            max_outer_iters: 50,
            objective_tol: 1e-6,
            rounding_threshold: 0.5,
            penalty: None,
            restart_count: 3,
            max_penalty_doublings: 4,
            binary_tol: 1e-3,
            queue_unit_bits: 1e5,
            seed: 0x5ca,
            warm_barrier: 1e-8,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("no feasible point for the rate constraints")]
    Infeasible,
}

/// One licensed `(subcarrier, user)` rate term.
#[derive(Debug, Clone)]
struct LicensedTerm {
    user: usize,
    own: usize,
    own_gain: f64,
    /// `(variable, gain)` for every other-cell power on the same subcarrier.
    interferers: Vec<(usize, f64)>,
}

/// Variable layout and constants of one slot's relaxed problem.
///
/// Full vector: `[p_c (L·U), p_u (W·U), x_c (L·U), x_u (W·U)]`.
#[derive(Debug, Clone)]
pub struct SlotModel {
    dims: Dims,
    lic_len: usize,
    unl_len: usize,
    /// Per-user weight `Q/unit`.
    weights: Vec<f64>,
    /// Units served per slot per nat of spectral efficiency, `B·T/unit/ln 2`.
    rate_scale: f64,
    /// Airtime share per unlicensed variable.
    unl_share: Vec<f64>,
    unl_snr_gain: Vec<f64>,
    terms: Vec<LicensedTerm>,
    noise: f64,
    v: f64,
    xi_c: f64,
    xi_u: f64,
    static_total: f64,
    pub penalty: f64,
    total_cap: f64,
    unl_cap: f64,
    interference_cap: f64,
    big_m: f64,
    macro_gain: Vec<f64>,
}

impl SlotModel {
    pub fn new(
        cfg: &NetworkConfig,
        state: &SlotState,
        queue: &QueueVector,
        success_probs: &[f64],
        v: f64,
        queue_unit_bits: f64,
    ) -> Self {
        let dims = cfg.dims();
        let users = dims.num_users();
        let lic_len = dims.licensed_len();
        let unl_len = dims.unlicensed_len();
        let mut terms = Vec::with_capacity(lic_len);
        for l in 0..dims.licensed {
            for u in 0..users {
                let k = dims.sbs_of(u);
                let mut interferers = Vec::new();
                for j in (0..dims.num_sbs()).filter(|&j| j != k) {
                    let g = state.licensed_gain[dims.lic_gain(l, j, u)];
                    interferers.extend(dims.users_of(j).map(|o| (dims.lic(l, o), g)));
                }
                terms.push(LicensedTerm {
                    user: u,
                    own: dims.lic(l, u),
                    own_gain: state.own_licensed_gain(&dims, l, u),
                    interferers,
                });
            }
        }
        let unl_share = (0..unl_len).map(|i| success_probs[dims.sbs_of(i % users)]).collect();
        let unl_snr_gain = state.unlicensed_gain.iter().map(|g| g / cfg.noise_power).collect();
        let macro_gain = (0..dims.licensed)
            .flat_map(|l| (0..users).map(move |u| (l, u)))
            .map(|(l, u)| state.macro_gain[dims.macro_gain(l, dims.sbs_of(u))])
            .collect();
        Self {
            weights: queue.0.iter().map(|q| q / queue_unit_bits).collect(),
            rate_scale: cfg.subcarrier_bandwidth * cfg.slot_length / queue_unit_bits / std::f64::consts::LN_2,
            unl_share,
            unl_snr_gain,
            terms,
            noise: cfg.noise_power,
            v,
            xi_c: cfg.amplifier_coeff_licensed,
            xi_u: cfg.amplifier_coeff_unlicensed,
            static_total: cfg.static_floor(),
            penalty: 0.0,
            total_cap: cfg.total_power_cap,
            unl_cap: cfg.unlicensed_power_cap,
            interference_cap: cfg.interference_cap,
            big_m: cfg.big_m,
            macro_gain,
            dims,
            lic_len,
            unl_len,
        }
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn num_vars(&self) -> usize {
        2 * (self.lic_len + self.unl_len)
    }

    pub fn num_powers(&self) -> usize {
        self.lic_len + self.unl_len
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rate_scale(&self) -> f64 {
        self.rate_scale
    }

    /// Penalty default: ten times the largest marginal cost or value of a
    /// unit of indicator (`V·P_total·ξ_c` or a queue-weighted rate).
    pub fn default_penalty(&self) -> f64 {
        let w_max = self.weights.iter().copied().fold(0.0, f64::max);
        10.0 * (self.v * self.total_cap * self.xi_c).max(w_max * self.rate_scale).max(1e-6)
    }

    pub fn x_offset(&self) -> usize {
        self.num_powers()
    }

    fn interference(&self, term: &LicensedTerm, z: &[f64]) -> f64 {
        self.noise + term.interferers.iter().map(|&(i, g)| g * z[i]).sum::<f64>()
    }

    /// `V·PC_tot` of the powers in `z`.
    pub fn power_cost(&self, z: &[f64]) -> f64 {
        let lic: f64 = z[..self.lic_len].iter().sum();
        let unl: f64 = z[self.lic_len..self.num_powers()].iter().sum();
        self.v * (self.static_total + self.xi_c * lic + self.xi_u * unl)
    }

    /// `∂(V·PC_tot)/∂z_i`; zero for indicators.
    pub fn power_coefficient(&self, i: usize) -> f64 {
        if i < self.lic_len {
            self.v * self.xi_c
        } else if i < self.num_powers() {
            self.v * self.xi_u
        } else {
            0.0
        }
    }

    /// Per-user service in objective units, from the powers in `z`.
    pub fn user_service(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.num_users()];
        for t in &self.terms {
            let i = self.interference(t, z);
            let s = t.own_gain * z[t.own];
            out[t.user] += self.rate_scale * (s / i).ln_1p();
        }
        let users = self.dims.num_users();
        for i in 0..self.unl_len {
            let p = z[self.lic_len + i];
            out[i % users] += self.rate_scale * self.unl_share[i] * (self.unl_snr_gain[i] * p).ln_1p();
        }
        out
    }

    /// `V·PC_tot − Σ w·R` for the powers in `z`.
    pub fn p2_objective(&self, z: &[f64]) -> f64 {
        let service = self.user_service(z);
        self.power_cost(z) - self.weights.iter().zip(&service).map(|(w, r)| w * r).sum::<f64>()
    }

    pub fn binary_residual(&self, z: &[f64]) -> f64 {
        z[self.x_offset()..].iter().map(|x| x - x * x).sum()
    }

    /// True relaxed objective `f − g`.
    pub fn p3_objective(&self, z: &[f64]) -> f64 {
        self.p2_objective(z) + self.penalty * self.binary_residual(z)
    }

    pub fn f_value(&self, z: &[f64]) -> f64 {
        let mut val = self.power_cost(z);
        for t in &self.terms {
            let total = self.interference(t, z) + t.own_gain * z[t.own];
            val -= self.weights[t.user] * self.rate_scale * total.max(1e-300).ln();
        }
        let users = self.dims.num_users();
        for i in 0..self.unl_len {
            let p = z[self.lic_len + i];
            val -= self.weights[i % users] * self.rate_scale * self.unl_share[i] * (self.unl_snr_gain[i] * p).ln_1p();
        }
        val + self.penalty * z[self.x_offset()..].iter().sum::<f64>()
    }

    pub fn g_value(&self, z: &[f64]) -> f64 {
        let mut val = 0.0;
        for t in &self.terms {
            val -= self.weights[t.user] * self.rate_scale * self.interference(t, z).max(1e-300).ln();
        }
        val + self.penalty * z[self.x_offset()..].iter().map(|x| x * x).sum::<f64>()
    }

    pub fn f_gradient(&self, z: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        grad[..self.lic_len].iter_mut().for_each(|g| *g = self.v * self.xi_c);
        grad[self.lic_len..self.num_powers()].iter_mut().for_each(|g| *g = self.v * self.xi_u);
        for t in &self.terms {
            let w = self.weights[t.user] * self.rate_scale;
            if w == 0.0 {
                continue;
            }
            let total = self.interference(t, z) + t.own_gain * z[t.own];
            let c = w / total;
            grad[t.own] -= c * t.own_gain;
            for &(i, g) in &t.interferers {
                grad[i] -= c * g;
            }
        }
        let users = self.dims.num_users();
        for i in 0..self.unl_len {
            let w = self.weights[i % users] * self.rate_scale * self.unl_share[i];
            let a = self.unl_snr_gain[i];
            grad[self.lic_len + i] -= w * a / (1.0 + a * z[self.lic_len + i]);
        }
        let off = self.x_offset();
        grad[off..].iter_mut().for_each(|g| *g = self.penalty);
    }

    pub fn g_gradient(&self, z: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for t in &self.terms {
            let w = self.weights[t.user] * self.rate_scale;
            if w == 0.0 {
                continue;
            }
            let c = w / self.interference(t, z);
            for &(i, g) in &t.interferers {
                grad[i] -= c * g;
            }
        }
        let off = self.x_offset();
        for i in off..z.len() {
            grad[i] = 2.0 * self.penalty * z[i];
        }
    }

    /// Adds `∇²f` restricted to the variables `map` marks free.
    fn add_f_hessian(&self, z: &[f64], map: &[Option<usize>], hess: &mut DMatrix<f64>) {
        let mut idx: Vec<(usize, f64)> = Vec::with_capacity(8);
        for t in &self.terms {
            let w = self.weights[t.user] * self.rate_scale;
            if w == 0.0 {
                continue;
            }
            let total = self.interference(t, z) + t.own_gain * z[t.own];
            let c = w / (total * total);
            idx.clear();
            if let Some(r) = map[t.own] {
                idx.push((r, t.own_gain));
            }
            idx.extend(t.interferers.iter().filter_map(|&(i, g)| map[i].map(|r| (r, g))));
            for &(a, ga) in &idx {
                for &(b, gb) in &idx {
                    hess[(a, b)] += c * ga * gb;
                }
            }
        }
        let users = self.dims.num_users();
        for i in 0..self.unl_len {
            if let Some(r) = map[self.lic_len + i] {
                let w = self.weights[i % users] * self.rate_scale * self.unl_share[i];
                let a = self.unl_snr_gain[i];
                let d = 1.0 + a * z[self.lic_len + i];
                hess[(r, r)] += w * a * a / (d * d);
            }
        }
    }

    /// Linear constraint rows over the full vector: power budgets, the
    /// interference cap, big-M coupling, one user per subcarrier and boxes.
    pub fn constraint_rows(&self) -> Vec<LinearRow> {
        let d = &self.dims;
        let users = d.num_users();
        let lic = |l: usize, u: usize| d.lic(l, u);
        let unl = |w: usize, u: usize| self.lic_len + d.unl(w, u);
        let xo = self.x_offset();
        let mut rows = Vec::new();
        for k in 0..d.num_sbs() {
            let mut total = Vec::new();
            let mut unlicensed = Vec::new();
            for u in d.users_of(k) {
                total.extend((0..d.licensed).map(|l| (lic(l, u), 1.0)));
                unlicensed.extend((0..d.unlicensed).map(|w| (unl(w, u), 1.0)));
            }
            total.extend(unlicensed.iter().copied());
            rows.push(LinearRow::new(RowLabel::new("total power", k), total, self.total_cap));
            if !unlicensed.is_empty() {
                rows.push(LinearRow::new(RowLabel::new("unlicensed power", k), unlicensed, self.unl_cap));
            }
        }
        for l in 0..d.licensed {
            let coeffs = (0..users).map(|u| (lic(l, u), self.macro_gain[lic(l, u)])).collect();
            rows.push(LinearRow::new(RowLabel::new("interference cap", l), coeffs, self.interference_cap));
        }
        for i in 0..self.num_powers() {
            rows.push(LinearRow::new(RowLabel::new("coupling", i), vec![(i, 1.0), (xo + i, -self.big_m)], 0.0));
        }
        let mut group = 0;
        for k in 0..d.num_sbs() {
            for l in 0..d.licensed {
                let coeffs = d.users_of(k).map(|u| (xo + lic(l, u), 1.0)).collect();
                rows.push(LinearRow::new(RowLabel::new("single user", group), coeffs, 1.0));
                group += 1;
            }
            for w in 0..d.unlicensed {
                let coeffs = d.users_of(k).map(|u| (xo + unl(w, u), 1.0)).collect();
                rows.push(LinearRow::new(RowLabel::new("single user", group), coeffs, 1.0));
                group += 1;
            }
        }
        for i in 0..self.num_vars() {
            rows.push(LinearRow::new(RowLabel::new("lower bound", i), vec![(i, -1.0)], 0.0));
        }
        for i in xo..self.num_vars() {
            rows.push(LinearRow::new(RowLabel::new("upper bound", i), vec![(i, 1.0)], 1.0));
        }
        rows
    }

    /// A strictly feasible full vector: every indicator at `1/(2 S_k)` and
    /// small, equal powers well inside every budget.
    pub fn interior_point(&self) -> Vec<f64> {
        let d = &self.dims;
        let mut z = vec![0.0; self.num_vars()];
        let xo = self.x_offset();
        for u in 0..d.num_users() {
            let s_k = d.users_of(d.sbs_of(u)).len() as f64;
            let n_lic = (d.licensed as f64 * s_k).max(1.0);
            let n_unl = (d.unlicensed as f64 * s_k).max(1.0);
            let p_c = self.total_cap / (4.0 * n_lic);
            let p_u = (self.unl_cap / (2.0 * n_unl)).min(self.total_cap / (4.0 * n_unl));
            for l in 0..d.licensed {
                z[d.lic(l, u)] = p_c;
                z[xo + d.lic(l, u)] = 0.5 / s_k;
            }
            for w in 0..d.unlicensed {
                z[self.lic_len + d.unl(w, u)] = p_u;
                z[xo + self.lic_len + d.unl(w, u)] = 0.5 / s_k;
            }
        }
        // Keep the macro-user interference at half its cap.
        let mut worst: f64 = 0.0;
        for l in 0..d.licensed {
            let load: f64 = (0..d.num_users()).map(|u| self.macro_gain[d.lic(l, u)] * z[d.lic(l, u)]).sum();
            worst = worst.max(load / self.interference_cap);
        }
        if worst > 0.5 {
            let scale = 0.5 / worst;
            z[..self.lic_len].iter_mut().for_each(|p| *p *= scale);
        }
        z
    }

    /// Full vector of an allocation (indicators and powers).
    pub fn pack(&self, alloc: &Allocation) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.num_vars());
        z.extend_from_slice(&alloc.p_licensed);
        z.extend_from_slice(&alloc.p_unlicensed);
        z.extend_from_slice(&alloc.x_licensed);
        z.extend_from_slice(&alloc.x_unlicensed);
        z
    }

    pub fn unpack(&self, z: &[f64]) -> Allocation {
        let (lic, unl) = (self.lic_len, self.unl_len);
        let xo = self.x_offset();
        Allocation {
            p_licensed: z[..lic].to_vec(),
            p_unlicensed: z[lic..lic + unl].to_vec(),
            x_licensed: z[xo..xo + lic].to_vec(),
            x_unlicensed: z[xo + lic..].to_vec(),
        }
    }

    /// Full indices of the indicators competing for each SBS subcarrier, one
    /// entry per user of that SBS.
    pub fn indicator_groups(&self) -> Vec<Vec<usize>> {
        let d = &self.dims;
        let xo = self.x_offset();
        let mut groups = Vec::new();
        for k in 0..d.num_sbs() {
            for l in 0..d.licensed {
                groups.push(d.users_of(k).map(|u| xo + d.lic(l, u)).collect());
            }
            for w in 0..d.unlicensed {
                groups.push(d.users_of(k).map(|u| xo + self.lic_len + d.unl(w, u)).collect());
            }
        }
        groups
    }
}

/// Concave lower bound on one user's service (objective units): the
/// interference log of every licensed term is replaced by its tangent at
/// `anchor`, which over-estimates it. Exact at the anchor.
pub struct ServiceMinorant<'m> {
    model: &'m SlotModel,
    terms: Vec<(&'m LicensedTerm, f64)>,
    unlicensed: Vec<usize>,
    anchor: Vec<f64>,
}

impl<'m> ServiceMinorant<'m> {
    pub fn new(model: &'m SlotModel, user: usize, anchor: &[f64]) -> Self {
        let terms = model
            .terms
            .iter()
            .filter(|t| t.user == user)
            .map(|t| (t, model.interference(t, anchor)))
            .collect();
        let users = model.dims.num_users();
        let unlicensed = (0..model.unl_len).filter(|i| i % users == user).collect();
        Self { model, terms, unlicensed, anchor: anchor.to_vec() }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let m = self.model;
        let mut val = 0.0;
        for &(t, i0) in &self.terms {
            let total = m.interference(t, z) + t.own_gain * z[t.own];
            let lin: f64 = t.interferers.iter().map(|&(j, g)| g * (z[j] - self.anchor[j])).sum::<f64>() / i0;
            val += m.rate_scale * (total.max(1e-300).ln() - i0.ln() - lin);
        }
        for &i in &self.unlicensed {
            val += m.rate_scale * m.unl_share[i] * (m.unl_snr_gain[i] * z[m.lic_len + i]).ln_1p();
        }
        val
    }

    /// Writes the gradient over the full vector into `grad`.
    pub fn gradient(&self, z: &[f64], grad: &mut [f64]) {
        let m = self.model;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &(t, i0) in &self.terms {
            let total = m.interference(t, z) + t.own_gain * z[t.own];
            grad[t.own] += m.rate_scale * t.own_gain / total;
            for &(j, g) in &t.interferers {
                grad[j] += m.rate_scale * g * (1.0 / total - 1.0 / i0);
            }
        }
        for &i in &self.unlicensed {
            let a = m.unl_snr_gain[i];
            grad[m.lic_len + i] += m.rate_scale * m.unl_share[i] * a / (1.0 + a * z[m.lic_len + i]);
        }
    }

    /// Adds the negated Hessian (positive semidefinite) on the free
    /// variables of `map`.
    pub fn add_negated_hessian(&self, z: &[f64], map: &[Option<usize>], hess: &mut DMatrix<f64>) {
        let m = self.model;
        let mut idx: Vec<(usize, f64)> = Vec::with_capacity(8);
        for &(t, _) in &self.terms {
            let total = m.interference(t, z) + t.own_gain * z[t.own];
            let c = m.rate_scale / (total * total);
            idx.clear();
            if let Some(r) = map[t.own] {
                idx.push((r, t.own_gain));
            }
            idx.extend(t.interferers.iter().filter_map(|&(i, g)| map[i].map(|r| (r, g))));
            for &(a, ga) in &idx {
                for &(b, gb) in &idx {
                    hess[(a, b)] += c * ga * gb;
                }
            }
        }
        for &i in &self.unlicensed {
            if let Some(r) = map[m.lic_len + i] {
                let a = m.unl_snr_gain[i];
                let d = 1.0 + a * z[m.lic_len + i];
                hess[(r, r)] += m.rate_scale * m.unl_share[i] * a * a / (d * d);
            }
        }
    }
}

/// Which entries of the full vector are optimized; the rest stay at `base`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub free: Vec<usize>,
    pub base: Vec<f64>,
    map: Vec<Option<usize>>,
}

impl Layout {
    pub fn full(n: usize) -> Self {
        Self::new((0..n).collect(), vec![0.0; n])
    }

    pub fn new(free: Vec<usize>, base: Vec<f64>) -> Self {
        let mut map = vec![None; base.len()];
        for (r, &i) in free.iter().enumerate() {
            map[i] = Some(r);
        }
        Self { free, base, map }
    }

    pub fn dim(&self) -> usize {
        self.free.len()
    }

    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let mut z = self.base.clone();
        for (r, &i) in self.free.iter().enumerate() {
            z[i] = reduced[r];
        }
        z
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| full[i]).collect()
    }

    /// Moves fixed variables of `rows` into the right-hand side and drops
    /// rows without free variables.
    pub fn restrict_rows(&self, rows: &[LinearRow]) -> Vec<LinearRow> {
        rows.iter()
            .filter_map(|row| {
                let mut rhs = row.rhs;
                let mut coeffs = Vec::with_capacity(row.coeffs.len());
                for &(i, a) in &row.coeffs {
                    match self.map[i] {
                        Some(r) => coeffs.push((r, a)),
                        None => rhs -= a * self.base[i],
                    }
                }
                (!coeffs.is_empty()).then(|| LinearRow::new(row.label, coeffs, rhs))
            })
            .collect()
    }

    pub fn map(&self) -> &[Option<usize>] {
        &self.map
    }
}

/// Convex majorizer `f(z) − g(z₀) − ∇g(z₀)·(z − z₀)` of the relaxed objective,
/// expressed on the free variables of a layout.
pub struct Surrogate<'m> {
    pub model: &'m SlotModel,
    pub layout: &'m Layout,
    anchor_value: f64,
    anchor_grad: Vec<f64>,
    anchor: Vec<f64>,
}

impl<'m> Surrogate<'m> {
    pub fn new(model: &'m SlotModel, layout: &'m Layout, anchor: &[f64]) -> Self {
        let mut anchor_grad = vec![0.0; anchor.len()];
        model.g_gradient(anchor, &mut anchor_grad);
        Self { model, layout, anchor_value: model.g_value(anchor), anchor_grad, anchor: anchor.to_vec() }
    }

    /// Surrogate value at a full vector.
    pub fn value_full(&self, z: &[f64]) -> f64 {
        let lin: f64 = self
            .anchor_grad
            .iter()
            .zip(z.iter().zip(&self.anchor))
            .map(|(g, (z, a))| g * (z - a))
            .sum();
        self.model.f_value(z) - self.anchor_value - lin
    }
}

impl SmoothFunction for Surrogate<'_> {
    fn value(&self, reduced: &[f64]) -> f64 {
        self.value_full(&self.layout.expand(reduced))
    }

    fn gradient(&self, reduced: &[f64], grad: &mut [f64]) {
        let z = self.layout.expand(reduced);
        let mut full = vec![0.0; z.len()];
        self.model.f_gradient(&z, &mut full);
        for (r, &i) in self.layout.free.iter().enumerate() {
            grad[r] = full[i] - self.anchor_grad[i];
        }
    }

    fn add_hessian(&self, reduced: &[f64], hess: &mut DMatrix<f64>) -> bool {
        let z = self.layout.expand(reduced);
        self.model.add_f_hessian(&z, self.layout.map(), hess);
        true
    }
}

/// Outcome of one majorize-minimize step.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaStep {
    pub point: Vec<f64>,
    pub surrogate_prev: f64,
    pub surrogate_new: f64,
    /// The subproblem did not improve on `prev`, which is returned unchanged.
    pub stalled: bool,
}

/// Builds the convex subproblem around `prev` (full vector) and solves it.
pub fn sca_step(
    model: &SlotModel,
    layout: &Layout,
    rows: &[LinearRow],
    interior: &[f64],
    prev: &[f64],
    settings: &SolverSettings,
) -> Result<ScaStep, SolverError> {
    let surrogate = Surrogate::new(model, layout, prev);
    let surrogate_prev = surrogate.value_full(prev);
    let mut problem = ConvexProblem::new(layout.dim(), Box::new(surrogate));
    problem.linear = rows.to_vec();
    problem.interior = Some(interior.to_vec());
    let out = solver::solve(&problem, &layout.restrict(prev), settings)?;
    let candidate = layout.expand(&out.point);
    if out.objective < surrogate_prev {
        Ok(ScaStep { point: candidate, surrogate_prev, surrogate_new: out.objective, stalled: false })
    } else {
        Ok(ScaStep { point: prev.to_vec(), surrogate_prev, surrogate_new: surrogate_prev, stalled: true })
    }
}

/// Trajectory of one SCA run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaRun {
    pub point: Vec<f64>,
    /// Relaxed objective `f − g` before the first and after every step.
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

impl ScaRun {
    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().expect("at least the start objective")
    }
}

/// Repeats [`sca_step`] until the relaxed objective stops improving.
pub fn run_sca(
    model: &SlotModel,
    layout: &Layout,
    start: &[f64],
    settings: &ScaSettings,
) -> Result<ScaRun, SolverError> {
    let rows = layout.restrict_rows(&model.constraint_rows());
    let interior = layout.restrict(&model.interior_point());
    run_sca_with(model, layout, &rows, &interior, start, settings)
}

fn run_sca_with(
    model: &SlotModel,
    layout: &Layout,
    rows: &[LinearRow],
    interior: &[f64],
    start: &[f64],
    settings: &ScaSettings,
) -> Result<ScaRun, SolverError> {
    let mut z = start.to_vec();
    let mut objectives = vec![model.p3_objective(&z)];
    let mut iterations = 0;
    let mut warm = settings.solver.clone();
    warm.barrier_start = settings.warm_barrier.min(warm.barrier_start);
    for i in 0..settings.max_outer_iters {
        // Later subproblems start next to their solution; skip the early
        // barrier stages.
        let solver = if i == 0 { &settings.solver } else { &warm };
        let step = sca_step(model, layout, rows, interior, &z, solver)?;
        iterations += 1;
        if step.stalled {
            break;
        }
        z = step.point;
        let prev = *objectives.last().unwrap();
        let obj = model.p3_objective(&z);
        objectives.push(obj);
        if (prev - obj).abs() <= settings.objective_tol * prev.abs().max(1.0) {
            break;
        }
    }
    Ok(ScaRun { point: z, objectives, iterations })
}

/// Diagnostics emitted for every scheduled slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotDiagnostics {
    /// SCA steps over all starts and penalty escalations.
    pub iterations: usize,
    /// SCA steps of the fixed-indicator power repair.
    pub repair_iterations: usize,
    /// Relaxed objective of the best start.
    pub relaxed_objective: f64,
    /// `V·PC_tot − Σ Q·R` of the returned binary allocation (queue units).
    pub final_objective: f64,
    /// `Σ (x − x²)` of the best relaxed point.
    pub penalty_residual: f64,
    pub penalty: f64,
    pub restarts_used: usize,
    /// Relaxed-objective trajectory of the best start.
    pub trajectory: Vec<f64>,
    /// The solver failed and the zero allocation was returned.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotDecision {
    pub allocation: Allocation,
    pub diagnostics: SlotDiagnostics,
}

/// Initial point: on each SBS subcarrier the user with the largest `Q·g`
/// gets `x = 1`; powers split the caps evenly over the active pairs.
pub fn initial_point(model: &SlotModel, state: &SlotState) -> Vec<f64> {
    let d = model.dims();
    let xo = model.x_offset();
    let mut z = vec![0.0; model.num_vars()];
    let score = |u: usize, g: f64| model.weights[u] * g;
    for k in 0..d.num_sbs() {
        let users: Vec<usize> = d.users_of(k).collect();
        let pick = |gain: &dyn Fn(usize) -> f64| {
            users
                .iter()
                .copied()
                .fold((users[0], f64::NEG_INFINITY), |(bu, bs), u| {
                    let s = score(u, gain(u));
                    if s > bs { (u, s) } else { (bu, bs) }
                })
                .0
        };
        let n_active = (d.licensed + d.unlicensed).max(1) as f64;
        for l in 0..d.licensed {
            let u = pick(&|u| state.own_licensed_gain(d, l, u));
            z[xo + d.lic(l, u)] = 1.0;
            z[d.lic(l, u)] = 0.5 * model.total_cap / n_active;
        }
        for w in 0..d.unlicensed {
            let u = pick(&|u| state.unlicensed_gain[d.unl(w, u)]);
            let i = model.lic_len + d.unl(w, u);
            z[xo + i] = 1.0;
            z[i] = (0.5 * model.unl_cap / d.unlicensed as f64).min(0.5 * model.total_cap / n_active);
        }
    }
    scale_into_interference_cap(model, &mut z);
    z
}

fn scale_into_interference_cap(model: &SlotModel, z: &mut [f64]) {
    let d = model.dims();
    let mut worst: f64 = 0.0;
    for l in 0..d.licensed {
        let load: f64 = (0..d.num_users()).map(|u| model.macro_gain[d.lic(l, u)] * z[d.lic(l, u)]).sum();
        worst = worst.max(load / model.interference_cap);
    }
    if worst > 0.5 {
        let scale = 0.5 / worst;
        z[..model.lic_len].iter_mut().for_each(|p| *p *= scale);
    }
}

/// A random feasible point: indicators drawn per subcarrier group with sum
/// below one, powers a random fraction of `x·Λ`, then scaled into the budgets.
pub fn random_point(model: &SlotModel, rng: &mut impl Rng) -> Vec<f64> {
    let d = model.dims();
    let xo = model.x_offset();
    let mut z = vec![0.0; model.num_vars()];
    for group in model.indicator_groups() {
        let draws: Vec<f64> = (0..=group.len()).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
        let sum: f64 = draws.iter().sum();
        for (i, &var) in group.iter().enumerate() {
            z[var] = draws[i] / sum;
            z[var - xo] = rng.gen::<f64>() * z[var] * model.big_m;
        }
    }
    for k in 0..d.num_sbs() {
        let lic: Vec<usize> = d.users_of(k).flat_map(|u| (0..d.licensed).map(move |l| d.lic(l, u))).collect();
        let unl: Vec<usize> = d
            .users_of(k)
            .flat_map(|u| (0..d.unlicensed).map(move |w| model.lic_len + d.unl(w, u)))
            .collect();
        let unl_sum: f64 = unl.iter().map(|&i| z[i]).sum();
        if unl_sum > 0.5 * model.unl_cap {
            unl.iter().for_each(|&i| z[i] *= 0.5 * model.unl_cap / unl_sum);
        }
        let total: f64 = lic.iter().chain(&unl).map(|&i| z[i]).sum();
        if total > 0.5 * model.total_cap {
            lic.iter().chain(&unl).for_each(|&i| z[i] *= 0.5 * model.total_cap / total);
        }
    }
    scale_into_interference_cap(model, &mut z);
    z
}

/// Rounds the indicators: per SBS subcarrier the largest relaxed `x` (lowest
/// user index on ties) becomes 1 if it reaches `threshold`, all others 0.
pub fn round_indicators(model: &SlotModel, z: &[f64], threshold: f64) -> Vec<f64> {
    let mut out = z.to_vec();
    for group in model.indicator_groups() {
        let best = group
            .iter()
            .copied()
            .fold(None::<usize>, |acc, i| match acc {
                Some(b) if z[b] >= z[i] => Some(b),
                _ => Some(i),
            })
            .expect("non-empty group");
        for &i in &group {
            out[i] = if i == best && z[i] >= threshold { 1.0 } else { 0.0 };
        }
    }
    let xo = model.x_offset();
    for i in 0..model.num_powers() {
        if out[xo + i] == 0.0 {
            out[i] = 0.0;
        }
    }
    out
}

/// Layout optimizing only the powers of pairs whose indicator is 1.
pub fn fixed_indicator_layout(model: &SlotModel, z: &[f64]) -> Layout {
    let xo = model.x_offset();
    let free = (0..model.num_powers()).filter(|&i| z[xo + i] == 1.0).collect();
    Layout::new(free, z.to_vec())
}

/// Drops numerically negligible powers and unassigns subcarriers left
/// without power.
pub fn clean_allocation(model: &SlotModel, z: &mut [f64]) {
    let xo = model.x_offset();
    let dust = 1e-9 * model.total_cap;
    for i in 0..model.num_powers() {
        if z[i] < dust || z[xo + i] == 0.0 {
            z[i] = 0.0;
            z[xo + i] = 0.0;
        }
    }
}

/// Re-optimizes the powers with the indicators of `z` held fixed.
pub fn repair_powers(model: &SlotModel, z: &[f64], settings: &ScaSettings) -> Result<ScaRun, SolverError> {
    let layout = fixed_indicator_layout(model, z);
    if layout.dim() == 0 {
        return Ok(ScaRun { point: z.to_vec(), objectives: vec![model.p3_objective(z)], iterations: 0 });
    }
    let rows = layout.restrict_rows(&model.constraint_rows());
    let interior = layout.restrict(&model.interior_point());
    // The relaxed powers are already close to optimal: start warm.
    let mut warm = settings.clone();
    warm.solver.barrier_start = settings.warm_barrier.min(settings.solver.barrier_start);
    run_sca_with(model, &layout, &rows, &interior, z, &warm)
}

/// Chooses the slot's binary allocation (one pass of the online algorithm).
///
/// `success_probs[k]` is SBS `k`'s unlicensed airtime share. Solver failures
/// return the zero allocation with `flagged` set.
pub fn decide_allocation(
    state: &SlotState,
    queue: &QueueVector,
    cfg: &NetworkConfig,
    success_probs: &[f64],
    settings: &ScaSettings,
) -> SlotDecision {
    let mut model = SlotModel::new(cfg, state, queue, success_probs, cfg.control_param, settings.queue_unit_bits);
    model.penalty = settings.penalty.or(cfg.dc_penalty).unwrap_or_else(|| model.default_penalty());
    match schedule(&mut model, state, settings) {
        Ok(decision) => decision,
        Err(e) => {
            log::warn!("slot {}: scheduler failed ({e}); using zero allocation", state.t);
            let zero = Allocation::zero(model.dims());
            let z = model.pack(&zero);
            SlotDecision {
                allocation: zero,
                diagnostics: SlotDiagnostics {
                    iterations: 0,
                    repair_iterations: 0,
                    relaxed_objective: f64::NAN,
                    final_objective: model.p2_objective(&z),
                    penalty_residual: 0.0,
                    penalty: model.penalty,
                    restarts_used: 0,
                    trajectory: Vec::new(),
                    flagged: true,
                },
            }
        }
    }
}

fn schedule(model: &mut SlotModel, state: &SlotState, settings: &ScaSettings) -> Result<SlotDecision, SolverError> {
    let layout = Layout::full(model.num_vars());
    let rows = model.constraint_rows();
    let interior = model.interior_point();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ state.t.wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let mut starts = vec![initial_point(model, state)];
    starts.extend((0..settings.restart_count).map(|_| random_point(model, &mut rng)));

    let mut best: Option<ScaRun> = None;
    let mut iterations = 0;
    for start in &starts {
        let run = run_sca_with(model, &layout, &rows, &interior, start, settings)?;
        iterations += run.iterations;
        if best.as_ref().map_or(true, |b| run.final_objective() < b.final_objective()) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one start");

    // Escalate the penalty until the relaxed indicators are nearly binary.
    let mut doublings = 0;
    while model.binary_residual(&best.point) > settings.binary_tol && doublings < settings.max_penalty_doublings {
        model.penalty *= 2.0;
        doublings += 1;
        let run = run_sca_with(model, &layout, &rows, &interior, &best.point, settings)?;
        iterations += run.iterations;
        best = run;
    }

    let rounded = round_indicators(model, &best.point, settings.rounding_threshold);
    let repair = repair_powers(model, &rounded, settings)?;
    let mut z = repair.point;
    clean_allocation(model, &mut z);
    let allocation = model.unpack(&z);
    Ok(SlotDecision {
        diagnostics: SlotDiagnostics {
            iterations,
            repair_iterations: repair.iterations,
            relaxed_objective: best.final_objective(),
            final_objective: model.p2_objective(&z),
            penalty_residual: model.binary_residual(&best.point),
            penalty: model.penalty,
            restarts_used: settings.restart_count,
            trajectory: best.objectives,
            flagged: false,
        },
        allocation,
    })
}
