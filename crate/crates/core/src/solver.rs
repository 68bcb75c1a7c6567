//! Log-barrier interior-point method for smooth convex objectives under
//! linear and smooth convex inequality constraints.
//!
//! Each barrier stage minimizes `F(z) − β Σ log sᵢ(z)` with damped Newton
//! steps (backtracking line search, Armijo condition), then shrinks `β` by a
//! constant factor. When the Newton system is too ill-conditioned the stage
//! falls back to steepest-descent steps on the same barrier function.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A smooth function of the decision vector, used both as objective and as
/// nonlinear constraint `h(z) ≤ 0`.
pub trait SmoothFunction {
    fn value(&self, z: &[f64]) -> f64;

    /// Writes `∇f(z)` into `grad` (which has the length of `z`).
    fn gradient(&self, z: &[f64], grad: &mut [f64]);

    /// Adds `∇²f(z)` into `hess`. Returns `false` when no Hessian is
    /// available, in which case the solver takes gradient steps.
    fn add_hessian(&self, _z: &[f64], _hess: &mut DMatrix<f64>) -> bool {
        false
    }
}

/// Names a constraint row for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RowLabel {
    pub kind: &'static str,
    pub index: usize,
}

impl RowLabel {
    pub fn new(kind: &'static str, index: usize) -> Self {
        Self { kind, index }
    }
}

impl std::fmt::Display for RowLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}]", self.kind, self.index)
    }
}

/// Sparse row `Σ coeffs · z ≤ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub label: RowLabel,
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(label: RowLabel, coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { label, coeffs, rhs }
    }

    /// `rhs − a·z`.
    pub fn slack(&self, z: &[f64]) -> f64 {
        self.rhs - self.coeffs.iter().map(|&(i, a)| a * z[i]).sum::<f64>()
    }
}

pub struct NonlinearConstraint<'a> {
    pub label: RowLabel,
    pub function: Box<dyn SmoothFunction + 'a>,
}

/// Minimize `objective` subject to `linear` rows and `nonlinear` constraints.
pub struct ConvexProblem<'a> {
    pub dim: usize,
    pub objective: Box<dyn SmoothFunction + 'a>,
    pub linear: Vec<LinearRow>,
    pub nonlinear: Vec<NonlinearConstraint<'a>>,
    /// A strictly feasible point, used to pull a boundary start inside.
    pub interior: Option<Vec<f64>>,
}

impl<'a> ConvexProblem<'a> {
    pub fn new(dim: usize, objective: Box<dyn SmoothFunction + 'a>) -> Self {
        Self { dim, objective, linear: Vec::new(), nonlinear: Vec::new(), interior: None }
    }

    pub fn num_constraints(&self) -> usize {
        self.linear.len() + self.nonlinear.len()
    }

    /// Smallest slack over all constraints; positive iff strictly feasible.
    pub fn min_slack(&self, z: &[f64]) -> f64 {
        let lin = self.linear.iter().map(|r| r.slack(z));
        let nl = self.nonlinear.iter().map(|c| -c.function.value(z));
        lin.chain(nl).fold(f64::INFINITY, f64::min)
    }

    fn strictly_feasible(&self, z: &[f64]) -> bool {
        self.linear.iter().all(|r| r.slack(z) > 0.0)
            && self.nonlinear.iter().all(|c| c.function.value(z) < 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Stationarity tolerance, relative to `1 + |F|`.
    pub tol: f64,
    /// Cap on inner (Newton or gradient) iterations over all stages.
    pub max_iter: usize,
    pub barrier_start: f64,
    pub barrier_end: f64,
    pub barrier_shrink: f64,
    pub armijo: f64,
    pub backtrack: f64,
    /// Newton systems with a larger condition estimate use gradient steps.
    pub max_condition: f64,
    /// Record every inner iteration in [`SolveOutcome::trace`].
    pub trace: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 2000,
            barrier_start: 1.0,
            barrier_end: 1e-8,
            barrier_shrink: 10.0,
            armijo: 1e-4,
            backtrack: 0.5,
            max_condition: 1e12,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StepKind {
    Newton,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub stage: usize,
    pub barrier: f64,
    pub iteration: usize,
    pub objective: f64,
    pub barrier_objective: f64,
    pub step: f64,
    pub kind: StepKind,
}

/// Writes a solver trace as CSV.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "barrier", "iteration", "objective", "barrier_objective", "step", "kind"])?;
    for r in rows {
        w.write_record(&[
            r.stage.to_string(),
            r.barrier.to_string(),
            r.iteration.to_string(),
            r.objective.to_string(),
            r.barrier_objective.to_string(),
            r.step.to_string(),
            format!("{:?}", r.kind),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOutcome {
    pub point: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Newton decrement of the final barrier function (gradient norm when no
    /// Hessian is available). Convergence also requires the duality-gap bound
    /// `m·β` within tolerance.
    pub stationarity: f64,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("start point has length {got}, problem has {expected} variables")]
    Dimension { expected: usize, got: usize },
    #[error("start point is infeasible (min slack {0:e}) and no interior point is available")]
    InfeasibleStart(f64),
    #[error("non-finite objective or gradient")]
    NonFinite,
}

struct Workspace {
    grad: Vec<f64>,
    tmp: Vec<f64>,
    hess: DMatrix<f64>,
}

/// Value of the barrier function, or `None` outside the strict interior.
fn barrier_value(problem: &ConvexProblem<'_>, z: &[f64], beta: f64) -> Option<(f64, f64)> {
    let mut log_sum = 0.0;
    for row in &problem.linear {
        let s = row.slack(z);
        if !(s > 0.0) {
            return None;
        }
        log_sum += s.ln();
    }
    for c in &problem.nonlinear {
        let s = -c.function.value(z);
        if !(s > 0.0) {
            return None;
        }
        log_sum += s.ln();
    }
    let f = problem.objective.value(z);
    if !f.is_finite() {
        return None;
    }
    Some((f, f - beta * log_sum))
}

/// Gradient of the barrier function into `ws.grad`; Hessian into `ws.hess`
/// when `want_hessian`. Returns whether the Hessian is complete.
fn barrier_derivatives(problem: &ConvexProblem<'_>, z: &[f64], beta: f64, ws: &mut Workspace, want_hessian: bool) -> bool {
    let n = problem.dim;
    ws.grad.iter_mut().for_each(|g| *g = 0.0);
    problem.objective.gradient(z, &mut ws.grad);
    let mut complete = true;
    if want_hessian {
        ws.hess.fill(0.0);
        complete &= problem.objective.add_hessian(z, &mut ws.hess);
    }
    for row in &problem.linear {
        let s = row.slack(z);
        let w = beta / s;
        for &(i, a) in &row.coeffs {
            ws.grad[i] += w * a;
        }
        if want_hessian {
            let w2 = beta / (s * s);
            for &(i, a) in &row.coeffs {
                for &(j, b) in &row.coeffs {
                    ws.hess[(i, j)] += w2 * a * b;
                }
            }
        }
    }
    for c in &problem.nonlinear {
        let s = -c.function.value(z);
        ws.tmp.iter_mut().for_each(|g| *g = 0.0);
        c.function.gradient(z, &mut ws.tmp);
        for i in 0..n {
            ws.grad[i] += beta / s * ws.tmp[i];
        }
        if want_hessian {
            let w2 = beta / (s * s);
            for i in 0..n {
                if ws.tmp[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    ws.hess[(i, j)] += w2 * ws.tmp[i] * ws.tmp[j];
                }
            }
            let mut h = DMatrix::zeros(n, n);
            if c.function.add_hessian(z, &mut h) {
                ws.hess += h * (beta / s);
            } else {
                complete = false;
            }
        }
    }
    complete
}

/// Newton direction from a Jacobi-scaled Cholesky factorization, or `None`
/// when the scaled Hessian is not safely positive definite.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>, max_condition: f64) -> Option<DVector<f64>> {
    let n = grad.len();
    let mut scale = vec![0.0; n];
    for (i, s) in scale.iter_mut().enumerate() {
        let d = hess[(i, i)];
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        *s = 1.0 / d.sqrt();
    }
    // Symmetric, so the column-major storage reads as row-major.
    let mut scaled: Vec<f64> = hess.as_slice().to_vec();
    for i in 0..n {
        let row = &mut scaled[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            *v *= scale[i] * scale[j];
        }
    }
    // The scaled matrix has a unit diagonal; on a failed or ill-conditioned
    // factorization retry with a growing Levenberg shift.
    let mut l = scaled.clone();
    let mut factored = false;
    for shift in [0.0, 1e-12, 1e-9, 1e-6, 1e-3, 1.0] {
        if shift > 0.0 {
            l.copy_from_slice(&scaled);
            for i in 0..n {
                l[i * n + i] += shift;
            }
        }
        if let Some(diag) = dense_cholesky(&mut l, n) {
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
            if lo > 0.0 && (hi / lo).powi(2) <= max_condition {
                factored = true;
                break;
            }
        }
    }
    if !factored {
        return None;
    }
    let mut y: Vec<f64> = (0..n).map(|i| grad[i] * scale[i]).collect();
    // Solve L y' = y, then Lᵀ x = y'.
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let dot: f64 = row.iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
        y[i] = (y[i] - dot) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in i + 1..n {
            v -= l[k * n + i] * y[k];
        }
        y[i] = v / l[i * n + i];
    }
    Some(DVector::from_iterator(n, y.iter().zip(&scale).map(|(v, s)| -v * s)))
}

/// In-place lower Cholesky factor of a row-major SPD matrix; returns the
/// diagonal of `L`, or `None` if a pivot is not positive.
fn dense_cholesky(a: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let mut diag = vec![0.0; n];
    for j in 0..n {
        let (head, tail) = a.split_at_mut(j * n);
        let row_j = &mut tail[..n];
        let d = row_j[j] - row_j[..j].iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        let d = d.sqrt();
        row_j[j] = d;
        diag[j] = d;
        let _ = head;
        let row_j: Vec<f64> = row_j[..j].to_vec();
        for i in j + 1..n {
            let row_i = &mut a[i * n..(i + 1) * n];
            let dot: f64 = row_i[..j].iter().zip(&row_j).map(|(x, y)| x * y).sum();
            row_i[j] = (row_i[j] - dot) / d;
        }
    }
    Some(diag)
}

fn entering_point(problem: &ConvexProblem<'_>, start: &[f64]) -> Result<Vec<f64>, SolverError> {
    if problem.strictly_feasible(start) {
        return Ok(start.to_vec());
    }
    let Some(interior) = &problem.interior else {
        return Err(SolverError::InfeasibleStart(problem.min_slack(start)));
    };
    let mut theta = 1e-6;
    while theta <= 1.0 {
        let z: Vec<f64> = start.iter().zip(interior).map(|(s, c)| (1.0 - theta) * s + theta * c).collect();
        if problem.strictly_feasible(&z) {
            return Ok(z);
        }
        theta *= 10.0;
    }
    if problem.strictly_feasible(interior) {
        Ok(interior.clone())
    } else {
        Err(SolverError::InfeasibleStart(problem.min_slack(start)))
    }
}

/// Minimizes the problem from a feasible `start`.
///
/// A start on the boundary is blended toward `problem.interior`. Hitting
/// `max_iter` returns the last iterate with `converged == false`.
pub fn solve(problem: &ConvexProblem<'_>, start: &[f64], settings: &SolverSettings) -> Result<SolveOutcome, SolverError> {
    let n = problem.dim;
    if start.len() != n {
        return Err(SolverError::Dimension { expected: n, got: start.len() });
    }
    if !problem.objective.value(start).is_finite() {
        return Err(SolverError::NonFinite);
    }
    let mut z = entering_point(problem, start)?;
    let mut ws = Workspace { grad: vec![0.0; n], tmp: vec![0.0; n], hess: DMatrix::zeros(n, n) };
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut exhausted = false;
    let mut beta = settings.barrier_start;
    let mut stage = 0;
    let mut candidate = vec![0.0; n];

    loop {
        let Some((_, mut phi)) = barrier_value(problem, &z, beta) else {
            return Err(SolverError::NonFinite);
        };
        let mut use_newton = true;
        loop {
            if iterations >= settings.max_iter {
                exhausted = true;
                break;
            }
            let complete = barrier_derivatives(problem, &z, beta, &mut ws, use_newton);
            if ws.grad.iter().any(|g| !g.is_finite()) {
                return Err(SolverError::NonFinite);
            }
            let grad = DVector::from_column_slice(&ws.grad);
            let mut direction = None;
            if use_newton && complete {
                direction = newton_direction(&ws.hess, &grad, settings.max_condition);
                if direction.is_none() {
                    use_newton = false;
                }
            } else {
                use_newton = false;
            }
            let kind = if direction.is_some() { StepKind::Newton } else { StepKind::Gradient };
            let d = direction.unwrap_or_else(|| -grad.clone());
            let slope = grad.dot(&d);
            // Newton decrement (or squared gradient norm) small enough: centered.
            let final_stage = beta <= settings.barrier_end * (1.0 + 1e-12);
            let centered_tol = if final_stage { 1e-20 } else { 1e-10 } * (1.0 + phi.abs());
            if -slope / 2.0 <= centered_tol {
                break;
            }

            // Stay strictly inside the linear rows from the first trial on.
            let mut step: f64 = 1.0;
            for row in &problem.linear {
                let rate: f64 = row.coeffs.iter().map(|&(i, a)| a * d[i]).sum();
                if rate > 0.0 {
                    step = step.min(0.99 * row.slack(&z) / rate);
                }
            }
            let mut accepted = None;
            while step > 1e-20 {
                for i in 0..n {
                    candidate[i] = z[i] + step * d[i];
                }
                if let Some((f, value)) = barrier_value(problem, &candidate, beta) {
                    if value <= phi + settings.armijo * step * slope {
                        accepted = Some((f, value));
                        break;
                    }
                }
                step *= settings.backtrack;
            }
            iterations += 1;
            let Some((f, value)) = accepted else {
                break;
            };
            z.copy_from_slice(&candidate);
            let improvement = phi - value;
            phi = value;
            if settings.trace {
                trace.push(TraceRow {
                    stage,
                    barrier: beta,
                    iteration: iterations,
                    objective: f,
                    barrier_objective: value,
                    step,
                    kind,
                });
            }
            // Rounding-limited progress ends the stage.
            let moved = step * d.norm();
            let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if improvement <= 1e-15 * (1.0 + phi.abs())
                || (kind == StepKind::Newton && step < 1e-6)
                || moved <= 1e-12 * (1.0 + z_norm)
            {
                break;
            }
        }
        if exhausted || beta <= settings.barrier_end * (1.0 + 1e-12) {
            break;
        }
        beta = (beta / settings.barrier_shrink).max(settings.barrier_end);
        stage += 1;
    }

    let complete = barrier_derivatives(problem, &z, beta, &mut ws, true);
    let grad = DVector::from_column_slice(&ws.grad);
    let stationarity = match complete.then(|| newton_direction(&ws.hess, &grad, f64::INFINITY)).flatten() {
        Some(d) => (-grad.dot(&d)).max(0.0).sqrt(),
        None => grad.norm(),
    };
    let objective = problem.objective.value(&z);
    if !objective.is_finite() {
        return Err(SolverError::NonFinite);
    }
    let budget = settings.tol * (1.0 + objective.abs());
    let gap = beta * problem.num_constraints() as f64;
    let converged = !exhausted && stationarity * stationarity / 2.0 <= budget && gap <= budget;
    Ok(SolveOutcome { point: z, objective, converged, iterations, stationarity, trace })
}

/// Per-row slack of a candidate point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowSlack {
    pub label: RowLabel,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionReport {
    pub objective: f64,
    pub slacks: Vec<RowSlack>,
    /// Rows with negative slack, with the violation amount.
    pub violations: Vec<(RowLabel, f64)>,
    /// Least-squares KKT residual `min_{λ≥0} ‖∇F + Σ λᵢ ∇cᵢ‖` over the
    /// active rows.
    pub kkt_residual: f64,
    pub gradient_norm: f64,
    /// Multipliers of the active rows from the non-negative fit.
    pub multipliers: Vec<(RowLabel, f64)>,
}

impl SolutionReport {
    pub fn max_violation(&self) -> f64 {
        self.violations.iter().map(|v| v.1).fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

/// Reports slacks, violations and first-order optimality of `point`.
///
/// A row counts as active when its slack is at most `active_tol`.
pub fn validate_solution(problem: &ConvexProblem<'_>, point: &[f64], active_tol: f64) -> SolutionReport {
    let n = problem.dim;
    let mut slacks = Vec::with_capacity(problem.num_constraints());
    let mut active: Vec<(RowLabel, Vec<f64>)> = Vec::new();
    for row in &problem.linear {
        let s = row.slack(point);
        slacks.push(RowSlack { label: row.label, slack: s });
        if s <= active_tol {
            let mut a = vec![0.0; n];
            for &(i, c) in &row.coeffs {
                a[i] += c;
            }
            active.push((row.label, a));
        }
    }
    for c in &problem.nonlinear {
        let s = -c.function.value(point);
        slacks.push(RowSlack { label: c.label, slack: s });
        if s <= active_tol {
            let mut a = vec![0.0; n];
            c.function.gradient(point, &mut a);
            active.push((c.label, a));
        }
    }
    let violations = slacks.iter().filter(|s| s.slack < 0.0).map(|s| (s.label, -s.slack)).collect();

    let mut grad = vec![0.0; n];
    problem.objective.gradient(point, &mut grad);
    let gradient_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let (kkt_residual, lambdas) = if active.is_empty() {
        (gradient_norm, Vec::new())
    } else {
        let a = DMatrix::from_fn(n, active.len(), |i, j| active[j].1[i]);
        let target = -DVector::from_column_slice(&grad);
        let lambda = nnls(&a, &target);
        ((&a * &lambda - &target).norm(), lambda.iter().copied().collect())
    };
    SolutionReport {
        objective: problem.objective.value(point),
        slacks,
        violations,
        kkt_residual,
        gradient_norm,
        multipliers: active.iter().map(|a| a.0).zip(lambdas).collect(),
    }
}

/// Lawson–Hanson non-negative least squares: `min ‖A·x − b‖, x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = a.ncols();
    let mut x = DVector::zeros(m);
    let mut passive = vec![false; m];
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);
    for _ in 0..(3 * m + 10) {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..m).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(&idx);
            let z_sub = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-14)
                .unwrap_or_else(|_| DVector::zeros(idx.len()));
            if z_sub.iter().all(|&v| v > 0.0) {
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = z_sub[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if z_sub[k] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - z_sub[k]));
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z_sub[k] - x[j]);
                if x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}
