//! Attempt/collision fixed point for the SBS and the Wi-Fi nodes sharing its
//! unlicensed channel, under the decoupling approximation.
//!
//! Each contender backs off through `K` stages; stage `j` has a mean backoff of
//! `b_j` slots. Given a collision probability `p`, the per-slot attempt
//! probability is
//!
//! ```text
//! τ(p) = (1 + p + … + p^{K−1}) / (b_0 + p·b_1 + … + p^{K−1}·b_{K−1})
//! ```
//!
//! and with `N` Wi-Fi nodes the collision probabilities seen by a Wi-Fi node
//! and by the SBS are `1 − (1−τ_w)^{N−1}(1−τ_l)` and `1 − (1−τ_w)^N`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsmaError {
    #[error("collision probability {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid backoff ladder: {0}")]
    Ladder(String),
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, last: CoexistencePoint },
}

/// Mean backoff per retransmission stage; the number of stages is the
/// retransmission limit `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BackoffLadder {
    mean_backoffs: Vec<f64>,
}

impl BackoffLadder {
    pub fn new(mean_backoffs: Vec<f64>) -> Result<Self, CsmaError> {
        let ladder = Self { mean_backoffs };
        ladder.check()?;
        Ok(ladder)
    }

    /// Binary-exponential ladder `b_j = 2^j · cw_min / 2`, `j < max_retx`.
    pub fn binary_exponential(cw_min: f64, max_retx: usize) -> Self {
        Self {
            mean_backoffs: (0..max_retx).map(|j| 2f64.powi(j as i32) * cw_min / 2.0).collect(),
        }
    }

    pub fn max_retx(&self) -> usize {
        self.mean_backoffs.len()
    }

    pub fn mean_backoffs(&self) -> &[f64] {
        &self.mean_backoffs
    }

    pub fn check(&self) -> Result<(), CsmaError> {
        if self.mean_backoffs.is_empty() {
            return Err(CsmaError::Ladder("at least one backoff stage is required".into()));
        }
        if let Some(b) = self.mean_backoffs.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(CsmaError::Ladder(format!("mean backoff {b} is not > 0")));
        }
        Ok(())
    }
}

impl Default for BackoffLadder {
    fn default() -> Self {
        Self::binary_exponential(16.0, 5)
    }
}

/// Solved contention state of one unlicensed channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoexistencePoint {
    pub tau_wifi: f64,
    pub tau_sbs: f64,
    pub p_wifi: f64,
    pub p_sbs: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Attempt probability for collision probability `p` on `ladder`.
pub fn attempt_prob(p: f64, ladder: &BackoffLadder) -> Result<f64, CsmaError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CsmaError::Domain(p));
    }
    let (mut num, mut den, mut pj) = (0.0, 0.0, 1.0);
    for &b in &ladder.mean_backoffs {
        num += pj;
        den += pj * b;
        pj *= p;
    }
    Ok(num / den)
}

/// Collision probabilities `(p_w, p_l)` given attempt probabilities and `N`
/// Wi-Fi nodes. With `N = 0` a Wi-Fi node's collision probability is
/// undefined and reported as `None`.
pub fn collision_probs(tau_wifi: f64, tau_sbs: f64, n: usize) -> (Option<f64>, f64) {
    let idle_wifi = 1.0 - tau_wifi;
    let p_sbs = 1.0 - idle_wifi.powi(n as i32);
    if n == 0 {
        return (None, p_sbs);
    }
    let p_wifi = 1.0 - idle_wifi.powi(n as i32 - 1) * (1.0 - tau_sbs);
    (Some(p_wifi), p_sbs)
}

/// Fraction of airtime the SBS wins: `τ_l · (1 − τ_w)^N`.
pub fn success_prob(point: &CoexistencePoint, n: usize) -> f64 {
    (point.tau_sbs * (1.0 - point.tau_wifi).powi(n as i32)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Damping `α` in `new = (1−α)·old + α·map(old)`.
    pub damping: f64,
    /// Starting collision probability for both contenders.
    pub initial_p: f64,
}

impl Default for FixedPointSettings {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500, damping: 0.5, initial_p: 0.0 }
    }
}

fn point_from(p_wifi: f64, p_sbs: f64, wifi: &BackoffLadder, sbs: &BackoffLadder, n: usize) -> CoexistencePoint {
    // Inputs are clamped to [0, 1] by the caller, so attempt_prob cannot fail.
    let tau_wifi = attempt_prob(p_wifi, wifi).unwrap_or(0.0);
    let tau_sbs = attempt_prob(p_sbs, sbs).unwrap_or(0.0);
    let (mw, ml) = collision_probs(tau_wifi, tau_sbs, n);
    let residual = (mw.unwrap_or(0.0) - p_wifi).abs().max((ml - p_sbs).abs());
    CoexistencePoint { tau_wifi, tau_sbs, p_wifi, p_sbs, residual, iterations: 0 }
}

/// Solves the coupled attempt/collision equations with damped Picard
/// iteration on `(p_w, p_l)`.
///
/// `residual` is the largest defect of the returned collision probabilities
/// under one application of the map; the attempt probabilities are exact
/// functions of them.
pub fn solve_fixed_point(
    n: usize,
    wifi: &BackoffLadder,
    sbs: &BackoffLadder,
    settings: &FixedPointSettings,
) -> Result<CoexistencePoint, CsmaError> {
    wifi.check()?;
    sbs.check()?;
    if n == 0 {
        return Ok(CoexistencePoint {
            tau_wifi: 0.0,
            tau_sbs: attempt_prob(0.0, sbs)?,
            p_wifi: 0.0,
            p_sbs: 0.0,
            residual: 0.0,
            iterations: 0,
        });
    }
    let alpha = settings.damping.clamp(f64::EPSILON, 1.0);
    let (mut pw, mut pl) = (settings.initial_p.clamp(0.0, 1.0), settings.initial_p.clamp(0.0, 1.0));
    let mut point = point_from(pw, pl, wifi, sbs, n);
    for it in 1..=settings.max_iter {
        let (mw, ml) = collision_probs(point.tau_wifi, point.tau_sbs, n);
        let mw = mw.unwrap_or(0.0);
        pw = ((1.0 - alpha) * pw + alpha * mw).clamp(0.0, 1.0);
        pl = ((1.0 - alpha) * pl + alpha * ml).clamp(0.0, 1.0);
        point = point_from(pw, pl, wifi, sbs, n);
        point.iterations = it;
        if point.residual <= settings.tol {
            return Ok(point);
        }
    }
    Err(CsmaError::NotConverged { iterations: settings.max_iter, residual: point.residual, last: point })
}

/// Fixed points reached from several starting collision probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplicityProbe {
    pub starts: Vec<f64>,
    pub points: Vec<CoexistencePoint>,
    /// Largest difference in any probability between two of the points.
    pub spread: f64,
}

impl MultiplicityProbe {
    /// All starts agree within `10·tol`.
    pub fn is_unique(&self, tol: f64) -> bool {
        self.spread <= 10.0 * tol
    }
}

/// Solves from `p ∈ {0, 0.5, 0.99}` and reports how far apart the results
/// are. Existence is guaranteed; uniqueness is not, so disagreement is a
/// finding to report rather than an error.
pub fn probe_multiplicity(
    n: usize,
    wifi: &BackoffLadder,
    sbs: &BackoffLadder,
    settings: &FixedPointSettings,
) -> Result<MultiplicityProbe, CsmaError> {
    let starts = vec![0.0, 0.5, 0.99];
    let points = starts
        .iter()
        .map(|&p| solve_fixed_point(n, wifi, sbs, &FixedPointSettings { initial_p: p, ..*settings }))
        .collect::<Result<Vec<_>, _>>()?;
    let probs = |c: &CoexistencePoint| [c.tau_wifi, c.tau_sbs, c.p_wifi, c.p_sbs];
    let mut spread: f64 = 0.0;
    for a in &points {
        for b in &points {
            for (x, y) in probs(a).iter().zip(probs(b)) {
                spread = spread.max((x - y).abs());
            }
        }
    }
    Ok(MultiplicityProbe { starts, points, spread })
}

/// Solved success probabilities for `N = 0..=n_max`, cached for a pair of ladders.
#[derive(Debug, Clone)]
pub struct SuccessTable {
    points: Vec<CoexistencePoint>,
}

impl SuccessTable {
    pub fn build(
        n_max: usize,
        wifi: &BackoffLadder,
        sbs: &BackoffLadder,
        settings: &FixedPointSettings,
    ) -> Result<Self, CsmaError> {
        let points = (0..=n_max)
            .map(|n| solve_fixed_point(n, wifi, sbs, settings))
            .collect::<Result<_, _>>()?;
        Ok(Self { points })
    }

    pub fn n_max(&self) -> usize {
        self.points.len() - 1
    }

    pub fn point(&self, n: usize) -> Option<&CoexistencePoint> {
        self.points.get(n)
    }

    pub fn success(&self, n: usize) -> Option<f64> {
        self.point(n).map(|p| success_prob(p, n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ladder3() -> BackoffLadder {
        BackoffLadder::new(vec![8.0, 16.0, 32.0]).unwrap()
    }

    #[test]
    fn attempt_prob_examples() {
        let l = ladder3();
        assert_abs_diff_eq!(attempt_prob(0.0, &l).unwrap(), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(attempt_prob(1.0, &l).unwrap(), 3.0 / 56.0, epsilon = 1e-15);
        // (1 + 0.3 + 0.09) / (8 + 4.8 + 2.88)
        assert_abs_diff_eq!(attempt_prob(0.3, &l).unwrap(), 1.39 / 15.68, epsilon = 1e-15);
        assert!((attempt_prob(0.3, &l).unwrap() - 0.088648).abs() < 1e-6);
    }

    #[test]
    fn attempt_prob_rejects_out_of_range() {
        assert_eq!(attempt_prob(1.5, &ladder3()), Err(CsmaError::Domain(1.5)));
        assert!(attempt_prob(-0.1, &ladder3()).is_err());
    }

    #[test]
    fn collision_examples() {
        assert_eq!(collision_probs(0.0, 0.0, 5), (Some(0.0), 0.0));
        let (pw, pl) = collision_probs(0.5, 0.0, 2);
        assert_abs_diff_eq!(pw.unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(pl, 0.75, epsilon = 1e-15);
        let (pw, pl) = collision_probs(0.1, 0.2, 3);
        assert_abs_diff_eq!(pw.unwrap(), 0.352, epsilon = 1e-12);
        assert_abs_diff_eq!(pl, 0.271, epsilon = 1e-12);
    }

    #[test]
    fn collision_with_no_wifi() {
        let (pw, pl) = collision_probs(0.3, 0.2, 0);
        assert_eq!(pw, None);
        assert_eq!(pl, 0.0);
    }

    #[test]
    fn success_examples() {
        let mut pt = CoexistencePoint {
            tau_wifi: 0.0,
            tau_sbs: 0.125,
            p_wifi: 0.0,
            p_sbs: 0.0,
            residual: 0.0,
            iterations: 0,
        };
        assert_abs_diff_eq!(success_prob(&pt, 0), 0.125);
        pt.tau_sbs = 0.2;
        pt.tau_wifi = 0.1;
        assert_abs_diff_eq!(success_prob(&pt, 2), 0.162, epsilon = 1e-15);
        pt.tau_wifi = 1.0;
        assert_eq!(success_prob(&pt, 1), 0.0);
    }

    #[test]
    fn empty_channel_convention() {
        let l = ladder3();
        let pt = solve_fixed_point(0, &l, &l, &FixedPointSettings::default()).unwrap();
        assert_eq!(pt.tau_sbs, 0.125);
        assert_eq!((pt.tau_wifi, pt.p_wifi, pt.p_sbs), (0.0, 0.0, 0.0));
    }

    #[test]
    fn non_convergence_reports_last_iterate() {
        let l = BackoffLadder::default();
        let settings = FixedPointSettings { max_iter: 2, ..Default::default() };
        match solve_fixed_point(10, &l, &l, &settings) {
            Err(CsmaError::NotConverged { iterations, residual, last }) => {
                assert_eq!(iterations, 2);
                assert!(residual > settings.tol);
                assert_eq!(last.iterations, 2);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn ladder_validation() {
        assert!(BackoffLadder::new(vec![]).is_err());
        assert!(BackoffLadder::new(vec![8.0, 0.0]).is_err());
        assert_eq!(BackoffLadder::default().mean_backoffs(), &[8.0, 16.0, 32.0, 64.0, 128.0]);
    }
}
