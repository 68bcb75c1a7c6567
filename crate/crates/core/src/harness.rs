//! Slot-by-slot episodes, control-parameter sweeps and policy comparison.
//!
//! Every slot: draw the channel and traffic, solve the contention fixed point
//! for each SBS, let the policy allocate, account power and service, then
//! update the queues. All rows of a sweep see the same random stream.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::baselines::{pcmps_decide, zero_power_decide, PolicyId};
use crate::config::ExperimentConfig;
use crate::csma::{CsmaError, FixedPointSettings, SuccessTable};
use crate::env::{self, linear_fit, sample_slot, update_queues, LinearFit, StabilityMetric};
use crate::model::QueueVector;
use crate::rates;
use crate::scheduler::{bound_constant_c0, decide_allocation};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("horizon must be at least one slot")]
    EmptyHorizon,
    #[error("control-parameter list must be non-empty and ascending")]
    BadSweep,
    #[error("contention model: {0}")]
    Csma(#[from] CsmaError),
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// One slot of an episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotRecord {
    pub t: u64,
    /// Consumed power `PC_tot` in W.
    pub pc_tot: f64,
    /// Offered service rate over all users, bit/s.
    pub r_tot: f64,
    /// Backlog over all users after the update, bits.
    pub sum_q: f64,
    pub flagged: bool,
    pub sca_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub policy: PolicyId,
    pub slots: usize,
    /// Mean of `pc_tot` over the series, W.
    pub avg_power: f64,
    /// Mean of `r_tot` over the series, bit/s.
    pub avg_rate: f64,
    /// Mean per-user backlog, bits.
    pub avg_queue: f64,
    /// Mean per-user arrivals, bits per slot.
    pub avg_arrival: f64,
    /// Little's-law delay `avg_queue / avg_arrival`, slots.
    pub avg_delay: f64,
    pub infeasible_slot_count: usize,
    /// Slots whose allocation broke a constraint (should stay zero).
    pub constraint_violations: usize,
    /// Empirical `½ Σ (E[A²] + E[R²])` in bits², from 1000 slots on.
    pub c0_estimate: Option<f64>,
    pub stability: Option<StabilityMetric>,
    /// Mean backlog per slot (bits per user), the input of the stability
    /// metric.
    #[serde(skip)]
    pub backlog_series: Vec<f64>,
    #[serde(skip)]
    pub series: Vec<SlotRecord>,
    /// Per-user backlog after each slot.
    #[serde(skip)]
    pub queues: Vec<Vec<f64>>,
}

impl RunMetrics {
    pub fn is_stable(&self, eps_slope: f64) -> bool {
        self.stability.as_ref().is_some_and(|s| s.is_stable(eps_slope))
    }
}

fn success_table(cfg: &ExperimentConfig) -> Result<SuccessTable, CsmaError> {
    SuccessTable::build(
        cfg.env.wifi_count.max(),
        &cfg.network.wifi_backoff,
        &cfg.network.sbs_backoff,
        &FixedPointSettings::default(),
    )
}

/// Runs `slots` slots of `policy` from empty queues.
pub fn run_episode(cfg: &ExperimentConfig, policy: PolicyId, slots: usize) -> Result<RunMetrics, HarnessError> {
    if slots == 0 {
        return Err(HarnessError::EmptyHorizon);
    }
    let table = success_table(cfg)?;
    let mut network = cfg.network.clone();
    if let PolicyId::Proposed { v } = policy {
        if !v.is_nan() {
            network.control_param = v;
        }
    }
    let dims = network.dims();
    let users = dims.num_users();
    let mut queue = QueueVector::zeros(users);
    let mut series = Vec::with_capacity(slots);
    let mut queues = Vec::with_capacity(slots);
    let mut backlog_series = Vec::with_capacity(slots);
    let mut arrivals_log = Vec::with_capacity(slots);
    let mut served_log = Vec::with_capacity(slots);
    let mut infeasible = 0;
    let mut violations = 0;

    for t in 0..slots as u64 {
        let state = sample_slot(&cfg.env, &network, t);
        let p_suc: Vec<f64> = state
            .wifi_count
            .iter()
            .map(|&n| table.success(n).expect("table covers the Wi-Fi count model"))
            .collect();
        let (allocation, flagged, iterations) = match policy {
            PolicyId::Proposed { .. } => {
                let d = decide_allocation(&state, &queue, &network, &p_suc, &cfg.scheduler);
                (d.allocation, d.diagnostics.flagged, d.diagnostics.iterations)
            }
            PolicyId::Pcmps => {
                let d = pcmps_decide(&state, &state.arrivals, &network, &p_suc, &cfg.scheduler);
                (d.allocation, d.flagged, d.iterations)
            }
            PolicyId::ZeroPower => (zero_power_decide(&dims), false, 0),
        };
        if !rates::check_allocation(&allocation, &state, &network, 1e-6).is_empty() {
            log::warn!("slot {t}: allocation violates a constraint");
            violations += 1;
        }
        let agg = rates::aggregate(&allocation, &state, &network, &p_suc);
        let served = agg.user_bits(network.slot_length);
        queue = update_queues(&queue, &served, &state.arrivals);
        infeasible += usize::from(flagged);
        series.push(SlotRecord {
            t,
            pc_tot: agg.total_power(),
            r_tot: agg.total_rate,
            sum_q: queue.total(),
            flagged,
            sca_iterations: iterations,
        });
        backlog_series.push(queue.mean());
        queues.push(queue.0.clone());
        arrivals_log.push(state.arrivals);
        served_log.push(served);
    }

    let n = slots as f64;
    let avg_power = series.iter().map(|r| r.pc_tot).sum::<f64>() / n;
    let avg_rate = series.iter().map(|r| r.r_tot).sum::<f64>() / n;
    let avg_queue = backlog_series.iter().sum::<f64>() / n;
    let avg_arrival = arrivals_log.iter().flatten().sum::<f64>() / (n * users as f64);
    let avg_delay = if avg_arrival > 0.0 { avg_queue / avg_arrival } else { 0.0 };
    Ok(RunMetrics {
        policy,
        slots,
        avg_power,
        avg_rate,
        avg_queue,
        avg_arrival,
        avg_delay,
        infeasible_slot_count: infeasible,
        constraint_violations: violations,
        c0_estimate: bound_constant_c0(&arrivals_log, &served_log).ok(),
        stability: env::stability_of_series(&backlog_series).ok(),
        backlog_series,
        series,
        queues,
    })
}

/// Least-squares fit `y = c0 + c1 / V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InverseFit {
    pub c0: f64,
    pub c1: f64,
    pub max_abs_residual: f64,
    /// `max y − min y`.
    pub range: f64,
}

impl InverseFit {
    /// Largest residual as a fraction of the range (0 for a flat series).
    pub fn residual_ratio(&self) -> f64 {
        if self.range > 0.0 {
            self.max_abs_residual / self.range
        } else {
            0.0
        }
    }
}

pub fn inverse_fit(vs: &[f64], ys: &[f64]) -> InverseFit {
    let inv: Vec<f64> = vs.iter().map(|v| 1.0 / v).collect();
    let LinearFit { intercept, slope, .. } = linear_fit(&inv, ys);
    let max_abs_residual = inv
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).abs())
        .fold(0.0, f64::max);
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(*y), hi.max(*y)));
    InverseFit { c0: intercept, c1: slope, max_abs_residual, range: hi - lo }
}

/// Every step `y[i] → y[i+1]` rises by at most `band · |y[i]|`.
pub fn non_increasing_within(ys: &[f64], band: f64) -> bool {
    ys.windows(2).all(|w| w[1] <= w[0] + band * w[0].abs())
}

/// Every step `y[i] → y[i+1]` falls by at most `band · |y[i]|`.
pub fn non_decreasing_within(ys: &[f64], band: f64) -> bool {
    ys.windows(2).all(|w| w[1] >= w[0] - band * w[0].abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub v: f64,
    pub avg_power: f64,
    pub avg_delay: f64,
    pub avg_queue: f64,
    /// `None` when the run is too short to judge.
    pub stable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffTable {
    pub slots: usize,
    pub seed: u64,
    pub rows: Vec<TradeoffRow>,
    pub power_fit: InverseFit,
    pub delay_fit: LinearFit,
}

impl TradeoffTable {
    pub fn from_runs(cfg: &ExperimentConfig, vs: &[f64], runs: &[RunMetrics]) -> Self {
        let eps = cfg.eps_slope();
        let rows: Vec<TradeoffRow> = vs
            .iter()
            .zip(runs)
            .map(|(&v, m)| TradeoffRow {
                v,
                avg_power: m.avg_power,
                avg_delay: m.avg_delay,
                avg_queue: m.avg_queue,
                stable: m.stability.map(|s| s.is_stable(eps)),
            })
            .collect();
        let powers: Vec<f64> = rows.iter().map(|r| r.avg_power).collect();
        let delays: Vec<f64> = rows.iter().map(|r| r.avg_delay).collect();
        TradeoffTable {
            slots: runs.first().map_or(0, |m| m.slots),
            seed: cfg.env.seed,
            power_fit: inverse_fit(vs, &powers),
            delay_fit: linear_fit(vs, &delays),
            rows,
        }
    }

    pub fn powers(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.avg_power).collect()
    }

    pub fn delays(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.avg_delay).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["V", "avg_power", "avg_delay", "avg_queue", "stable"])?;
        for r in &self.rows {
            w.write_record(&[
                r.v.to_string(),
                r.avg_power.to_string(),
                r.avg_delay.to_string(),
                r.avg_queue.to_string(),
                r.stable.map_or(String::new(), |b| b.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub table: TradeoffTable,
    pub runs: Vec<RunMetrics>,
}

fn check_sweep(vs: &[f64]) -> Result<(), HarnessError> {
    let ascending = vs.windows(2).all(|w| w[0] < w[1]);
    if vs.is_empty() || !ascending || vs.iter().any(|v| !(*v >= 0.0)) {
        return Err(HarnessError::BadSweep);
    }
    Ok(())
}

/// One episode per control parameter, all on the same random stream.
pub fn sweep_v(cfg: &ExperimentConfig, vs: &[f64], slots: usize) -> Result<Sweep, HarnessError> {
    check_sweep(vs)?;
    let runs = vs
        .par_iter()
        .map(|&v| run_episode(cfg, PolicyId::Proposed { v }, slots))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Sweep { table: TradeoffTable::from_runs(cfg, vs, &runs), runs })
}

/// Writes per-slot series: `t, V, PC_tot, R_tot, sum_Q` and optionally the
/// per-user backlog.
pub fn write_series_csv<W: Write>(
    runs: &[(Option<f64>, &RunMetrics)],
    per_user: bool,
    out: W,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let users = runs.first().and_then(|(_, m)| m.queues.first()).map_or(0, Vec::len);
    let mut header = vec!["t".to_string(), "V".into(), "PC_tot".into(), "R_tot".into(), "sum_Q".into()];
    if per_user {
        header.extend((0..users).map(|u| format!("Q_{u}")));
    }
    w.write_record(&header)?;
    for (v, m) in runs {
        let v = v.map_or(String::new(), |v| v.to_string());
        for (rec, q) in m.series.iter().zip(&m.queues) {
            let mut row = vec![rec.t.to_string(), v.clone(), rec.pc_tot.to_string(), rec.r_tot.to_string(), rec.sum_q.to_string()];
            if per_user {
                row.extend(q.iter().map(|x| x.to_string()));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Power and delay of one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub v: f64,
    pub avg_power: f64,
    pub avg_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedPoint {
    pub v: f64,
    pub avg_power: f64,
    pub avg_delay: f64,
    /// `avg_power / reference avg_power`.
    pub power_ratio: f64,
    /// `100 · (1 − power_ratio)`.
    pub power_reduction_pct: f64,
}

pub const PUBLISHED_REDUCTION_PCT: f64 = 72.1;
pub const DELAY_MATCH_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub reference_policy: PolicyId,
    pub reference_power: f64,
    pub reference_delay: f64,
    pub reference_infeasible_slots: usize,
    /// Swept (and search) points of the proposed policy, ascending in `V`.
    pub points: Vec<OperatingPoint>,
    /// `V` values no worse than the reference in both power and delay.
    pub dominance_window: Vec<f64>,
    pub matched: Option<MatchedPoint>,
    /// Why no matched point exists, if so.
    pub note: Option<String>,
    pub published_reduction_pct: f64,
}

/// `V` values whose point is no worse than `reference` in both metrics.
pub fn dominance_window(reference: (f64, f64), points: &[OperatingPoint]) -> Vec<f64> {
    points
        .iter()
        .filter(|p| p.avg_power <= reference.0 && p.avg_delay <= reference.1)
        .map(|p| p.v)
        .collect()
}

/// A point whose delay is within `tol` (relative) of the reference delay;
/// the closest such point wins.
pub fn matched_in(reference: (f64, f64), points: &[OperatingPoint], tol: f64) -> Option<MatchedPoint> {
    let (ref_power, ref_delay) = reference;
    points
        .iter()
        .filter(|p| (p.avg_delay - ref_delay).abs() <= tol * ref_delay.abs().max(f64::MIN_POSITIVE))
        .min_by(|a, b| (a.avg_delay - ref_delay).abs().total_cmp(&(b.avg_delay - ref_delay).abs()))
        .map(|p| {
            let ratio = if ref_power > 0.0 { p.avg_power / ref_power } else { 1.0 };
            MatchedPoint {
                v: p.v,
                avg_power: p.avg_power,
                avg_delay: p.avg_delay,
                power_ratio: ratio,
                power_reduction_pct: 100.0 * (1.0 - ratio),
            }
        })
}

/// Adjacent points whose delays straddle `target`.
pub fn bracket(points: &[OperatingPoint], target: f64) -> Option<(OperatingPoint, OperatingPoint)> {
    points
        .windows(2)
        .find(|w| (w[0].avg_delay - target) * (w[1].avg_delay - target) <= 0.0)
        .map(|w| (w[0], w[1]))
}

const MAX_SEARCH_RUNS: usize = 12;

/// Compares the proposed policy (swept over `vs`) with PCMPS on the same
/// stream, searching further in `V` for a delay match when needed.
pub fn compare_policies(cfg: &ExperimentConfig, vs: &[f64], slots: usize) -> Result<ComparisonReport, HarnessError> {
    check_sweep(vs)?;
    let reference = run_episode(cfg, PolicyId::Pcmps, slots)?;
    let sweep = sweep_v(cfg, vs, slots)?;
    compare_with(cfg, &reference, &sweep.runs, vs, slots)
}

/// [`compare_policies`] on already-computed runs.
pub fn compare_with(
    cfg: &ExperimentConfig,
    reference: &RunMetrics,
    runs: &[RunMetrics],
    vs: &[f64],
    slots: usize,
) -> Result<ComparisonReport, HarnessError> {
    let target = (reference.avg_power, reference.avg_delay);
    let mut points: Vec<OperatingPoint> = vs
        .iter()
        .zip(runs)
        .map(|(&v, m)| OperatingPoint { v, avg_power: m.avg_power, avg_delay: m.avg_delay })
        .collect();
    let window = dominance_window(target, &points);
    let run_at = |v: f64| -> Result<OperatingPoint, HarnessError> {
        let m = run_episode(cfg, PolicyId::Proposed { v }, slots)?;
        log::info!("delay search: V={v} power={:.3} delay={:.3}", m.avg_power, m.avg_delay);
        Ok(OperatingPoint { v, avg_power: m.avg_power, avg_delay: m.avg_delay })
    };
    let insert = |points: &mut Vec<OperatingPoint>, p: OperatingPoint| {
        let at = points.partition_point(|q| q.v < p.v);
        points.insert(at, p);
    };

    let mut searches = 0;
    let mut note = None;
    while matched_in(target, &points, DELAY_MATCH_TOL).is_none() {
        if searches >= MAX_SEARCH_RUNS {
            note = Some(format!("no matched-delay point after {MAX_SEARCH_RUNS} extra runs"));
            break;
        }
        let next = if let Some((a, b)) = bracket(&points, target.1) {
            // Interpolate in log V (geometric midpoint for V = 0 endpoints).
            let (la, lb) = (a.v.max(1e-3).ln(), b.v.max(1e-3).ln());
            let span = b.avg_delay - a.avg_delay;
            let frac = if span.abs() > 0.0 { ((target.1 - a.avg_delay) / span).clamp(0.1, 0.9) } else { 0.5 };
            (la + frac * (lb - la)).exp()
        } else {
            let first = points[0];
            let last = *points.last().expect("non-empty sweep");
            if !reference.avg_delay.is_finite() {
                note = Some("reference delay is not finite".into());
                break;
            }
            if last.avg_delay < target.1 {
                last.v * 2.0
            } else if first.avg_delay > target.1 && first.v > 1e-3 {
                first.v / 2.0
            } else {
                note = Some("sweep does not bracket the reference delay".into());
                break;
            }
        };
        insert(&mut points, run_at(next)?);
        searches += 1;
    }
    let matched = matched_in(target, &points, DELAY_MATCH_TOL);
    if matched.is_none() && note.is_none() {
        note = Some("no matched-delay point".into());
    }
    Ok(ComparisonReport {
        reference_policy: reference.policy,
        reference_power: reference.avg_power,
        reference_delay: reference.avg_delay,
        reference_infeasible_slots: reference.infeasible_slot_count,
        points,
        dominance_window: window,
        matched,
        note,
        published_reduction_pct: PUBLISHED_REDUCTION_PCT,
    })
}
