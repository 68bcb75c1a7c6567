//! Reference policies: per-slot power minimization (PCMPS) and the zero
//! allocation.
//!
//! PCMPS ignores the queues. Each slot it minimizes the consumed power
//! subject to the usual constraints plus `R_u ≥ A_u` for the slot's own
//! arrivals. The rate constraint is handled with the same log-difference
//! split as the scheduler: the interference log is linearized, which gives a
//! concave lower bound on each rate, so every iterate is feasible for the
//! true constraint.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Allocation, Dims, NetworkConfig, QueueVector, SlotState};
use crate::scheduler::{
    decide_allocation, initial_point, Layout, ScaSettings, ServiceMinorant, SlotDiagnostics, SlotModel,
};
use crate::solver::{self, ConvexProblem, NonlinearConstraint, RowLabel, SmoothFunction, SolverError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PolicyId {
    Proposed { v: f64 },
    Pcmps,
    ZeroPower,
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyId::Proposed { v } => write!(f, "proposed(V={v})"),
            PolicyId::Pcmps => f.write_str("pcmps"),
            PolicyId::ZeroPower => f.write_str("zero"),
        }
    }
}

impl FromStr for PolicyId {
    type Err = String;

    /// `proposed`, `pcmps` or `zero`; the proposed policy's `V` comes from
    /// the configuration unless written as `proposed:V`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.split_once(':') {
            Some(("proposed", v)) => match v.parse::<f64>() {
                Ok(v) if v >= 0.0 => Ok(PolicyId::Proposed { v }),
                _ => Err(format!("bad control parameter in `{s}`")),
            },
            None if lower == "proposed" => Ok(PolicyId::Proposed { v: f64::NAN }),
            None if lower == "pcmps" => Ok(PolicyId::Pcmps),
            None if lower == "zero" || lower == "zero_power" => Ok(PolicyId::ZeroPower),
            _ => Err(format!("unknown policy `{s}` (expected proposed, pcmps or zero)")),
        }
    }
}

pub fn zero_power_decide(dims: &Dims) -> Allocation {
    Allocation::zero(dims)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcmpsDecision {
    pub allocation: Allocation,
    /// Arrivals exceeded what any candidate could serve; the max-rate
    /// fallback was used.
    pub flagged: bool,
    /// Phase-II SCA steps of the chosen candidate.
    pub iterations: usize,
    /// Diagnostics of the fallback decision, if any.
    pub fallback: Option<SlotDiagnostics>,
}

/// `Σ ξ·p` (times `V = 1`) on the free powers.
struct PowerObjective<'m> {
    model: &'m SlotModel,
    layout: &'m Layout,
}

impl SmoothFunction for PowerObjective<'_> {
    fn value(&self, reduced: &[f64]) -> f64 {
        self.model.power_cost(&self.layout.expand(&reduced[..self.layout.dim()]))
    }

    fn gradient(&self, _reduced: &[f64], grad: &mut [f64]) {
        for (r, &i) in self.layout.free.iter().enumerate() {
            grad[r] = self.model.power_coefficient(i);
        }
    }

    fn add_hessian(&self, _z: &[f64], _hess: &mut DMatrix<f64>) -> bool {
        true
    }
}

/// `−t` for the phase-I slack stored after the free powers.
struct MaximizeSlack {
    index: usize,
}

impl SmoothFunction for MaximizeSlack {
    fn value(&self, z: &[f64]) -> f64 {
        -z[self.index]
    }

    fn gradient(&self, _z: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        grad[self.index] = -1.0;
    }

    fn add_hessian(&self, _z: &[f64], _hess: &mut DMatrix<f64>) -> bool {
        true
    }
}

/// `demand − R̃(p) + t ≤ 0`, with `t` present only in phase I.
struct RateConstraint<'m> {
    minorant: ServiceMinorant<'m>,
    layout: &'m Layout,
    demand: f64,
    slack_index: Option<usize>,
}

impl RateConstraint<'_> {
    fn full(&self, reduced: &[f64]) -> Vec<f64> {
        self.layout.expand(&reduced[..self.layout.dim()])
    }
}

impl SmoothFunction for RateConstraint<'_> {
    fn value(&self, reduced: &[f64]) -> f64 {
        let t = self.slack_index.map_or(0.0, |i| reduced[i]);
        self.demand - self.minorant.value(&self.full(reduced)) + t
    }

    fn gradient(&self, reduced: &[f64], grad: &mut [f64]) {
        let z = self.full(reduced);
        let mut full = vec![0.0; z.len()];
        self.minorant.gradient(&z, &mut full);
        for (r, &i) in self.layout.free.iter().enumerate() {
            grad[r] = -full[i];
        }
        if let Some(i) = self.slack_index {
            grad[i] = 1.0;
        }
    }

    fn add_hessian(&self, reduced: &[f64], hess: &mut DMatrix<f64>) -> bool {
        self.minorant.add_negated_hessian(&self.full(reduced), self.layout.map(), hess);
        true
    }
}

fn rate_constraints<'m>(
    model: &'m SlotModel,
    layout: &'m Layout,
    anchor: &[f64],
    demand: &[f64],
    slack_index: Option<usize>,
) -> Vec<NonlinearConstraint<'m>> {
    demand
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(u, &d)| NonlinearConstraint {
            label: RowLabel::new("rate", u),
            function: Box::new(RateConstraint {
                minorant: ServiceMinorant::new(model, u, anchor),
                layout,
                demand: d,
                slack_index,
            }),
        })
        .collect()
}

/// Phase I: maximizes the common rate margin `t` from the interior powers.
/// Returns full powers with every demanded rate strictly met, or `None`.
fn phase_one(
    model: &SlotModel,
    layout: &Layout,
    demand: &[f64],
    settings: &ScaSettings,
) -> Result<Option<Vec<f64>>, SolverError> {
    let n = layout.dim();
    let rows = layout.restrict_rows(&model.constraint_rows());
    let mut z = layout.expand(&layout.restrict(&model.interior_point()));
    let service = model.user_service(&z);
    let mut t = demand
        .iter()
        .zip(&service)
        .filter(|(d, _)| **d > 0.0)
        .map(|(d, s)| s - d)
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let mut last = f64::NEG_INFINITY;
    for i in 0..settings.max_outer_iters {
        let mut problem = ConvexProblem::new(n + 1, Box::new(MaximizeSlack { index: n }));
        problem.linear = rows.clone();
        problem.nonlinear = rate_constraints(model, layout, &z, demand, Some(n));
        let mut start = layout.restrict(&z);
        start.push(t);
        let mut solver = settings.solver.clone();
        if i > 0 {
            solver.barrier_start = settings.warm_barrier.min(solver.barrier_start);
        }
        let out = solver::solve(&problem, &start, &solver)?;
        log::trace!("phase1 step {i}: newton {} t {}", out.iterations, out.point[n]);
        z = layout.expand(&out.point[..n]);
        t = out.point[n];
        if t > 0.0 {
            return Ok(Some(z));
        }
        if (t - last).abs() <= settings.objective_tol * t.abs().max(1.0) {
            break;
        }
        last = t;
    }
    Ok(None)
}

/// Phase II: SCA on the power with the rate minorants re-anchored each step.
fn phase_two(
    model: &SlotModel,
    layout: &Layout,
    demand: &[f64],
    start: Vec<f64>,
    settings: &ScaSettings,
) -> Result<(Vec<f64>, usize), SolverError> {
    let rows = layout.restrict_rows(&model.constraint_rows());
    let mut z = start;
    let mut cost = model.power_cost(&z);
    let mut iterations = 0;
    for i in 0..settings.max_outer_iters {
        let mut problem = ConvexProblem::new(layout.dim(), Box::new(PowerObjective { model, layout }));
        problem.linear = rows.clone();
        problem.nonlinear = rate_constraints(model, layout, &z, demand, None);
        let mut solver = settings.solver.clone();
        if i > 0 {
            solver.barrier_start = settings.warm_barrier.min(solver.barrier_start);
        }
        let out = solver::solve(&problem, &layout.restrict(&z), &solver)?;
        log::trace!("phase2 step {i}: newton {} cost {}", out.iterations, model.power_cost(&layout.expand(&out.point)));
        iterations += 1;
        let next = layout.expand(&out.point);
        let next_cost = model.power_cost(&next);
        if next_cost >= cost {
            break;
        }
        z = next;
        let change = cost - next_cost;
        cost = next_cost;
        if change <= settings.objective_tol * cost.abs().max(1.0) {
            break;
        }
    }
    Ok((z, iterations))
}

/// Candidate indicator patterns: the arrival-weighted best-gain rule plus
/// random single-user choices per subcarrier (deduplicated).
fn candidate_assignments(model: &SlotModel, state: &SlotState, settings: &ScaSettings) -> Vec<Vec<f64>> {
    let xo = model.x_offset();
    let groups = model.indicator_groups();
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut first = initial_point(model, state);
    first[..xo].iter_mut().for_each(|p| *p = 0.0);
    out.push(first);
    if groups.iter().any(|g| g.len() > 1) {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9c ^ state.t.wrapping_mul(0x2545_F491_4F6C_DD1D));
        for _ in 0..settings.restart_count {
            let mut z = vec![0.0; model.num_vars()];
            for g in &groups {
                z[g[rng.gen_range(0..g.len())]] = 1.0;
            }
            if !out.contains(&z) {
                out.push(z);
            }
        }
    }
    out
}

/// Minimum-power allocation serving this slot's arrivals (`arrivals` in
/// bits). Infeasible slots fall back to the `V = 0` scheduler weighted by
/// the arrivals and are flagged.
pub fn pcmps_decide(
    state: &SlotState,
    arrivals: &[f64],
    cfg: &NetworkConfig,
    success_probs: &[f64],
    settings: &ScaSettings,
) -> PcmpsDecision {
    let dims = cfg.dims();
    if arrivals.iter().all(|&a| a <= 0.0) {
        return PcmpsDecision { allocation: Allocation::zero(&dims), flagged: false, iterations: 0, fallback: None };
    }
    let queue = QueueVector(arrivals.to_vec());
    let model = SlotModel::new(cfg, state, &queue, success_probs, 1.0, settings.queue_unit_bits);
    let demand: Vec<f64> = arrivals.iter().map(|a| a / settings.queue_unit_bits).collect();

    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for x in candidate_assignments(&model, state, settings) {
        let layout = Layout::new(
            (0..model.num_powers()).filter(|&i| x[model.x_offset() + i] == 1.0).collect(),
            x.clone(),
        );
        let attempt = phase_one(&model, &layout, &demand, settings)
            .and_then(|start| start.map(|s| phase_two(&model, &layout, &demand, s, settings)).transpose());
        match attempt {
            Ok(Some((z, iters))) => {
                let served = model.user_service(&z);
                if served.iter().zip(&demand).any(|(r, d)| r < d) {
                    continue;
                }
                let cost = model.power_cost(&z);
                if best.as_ref().map_or(true, |b| cost < b.0) {
                    best = Some((cost, z, iters));
                }
            }
            Ok(None) => {}
            Err(e) => log::debug!("slot {}: PCMPS candidate failed: {e}", state.t),
        }
    }

    match best {
        Some((_, z, iterations)) => {
            PcmpsDecision { allocation: model.unpack(&z), flagged: false, iterations, fallback: None }
        }
        None => {
            log::debug!("slot {}: arrivals exceed capacity, serving at maximum rate", state.t);
            let mut max_rate = cfg.clone();
            max_rate.control_param = 0.0;
            let decision = decide_allocation(state, &queue, &max_rate, success_probs, settings);
            PcmpsDecision {
                allocation: decision.allocation,
                flagged: true,
                iterations: decision.diagnostics.iterations,
                fallback: Some(decision.diagnostics),
            }
        }
    }
}
