use laa_core::csma::{
    attempt_prob, collision_probs, probe_multiplicity, solve_fixed_point, success_prob, BackoffLadder,
    FixedPointSettings,
};
use proptest::prelude::*;

fn ladder(cw: f64, stages: usize) -> BackoffLadder {
    BackoffLadder::binary_exponential(cw, stages)
}

/// Attempt probability computed directly from the ladder means.
fn tau_of(p: f64, means: &[f64]) -> f64 {
    let num: f64 = (0..means.len()).map(|j| p.powi(j as i32)).sum();
    let den: f64 = means.iter().enumerate().map(|(j, b)| p.powi(j as i32) * b).sum();
    num / den
}

/// Bisection on `τ_w`: everything else is a function of it, and the Wi-Fi
/// self-consistency defect is decreasing in `τ_w`.
fn oracle(n: usize, wifi: &[f64], sbs: &[f64]) -> (f64, f64) {
    let defect = |tw: f64| {
        let pl = 1.0 - (1.0 - tw).powi(n as i32);
        let tl = tau_of(pl, sbs);
        let pw = 1.0 - (1.0 - tw).powi(n as i32 - 1) * (1.0 - tl);
        (tau_of(pw, wifi) - tw, tl)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if defect(mid).0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tw = 0.5 * (lo + hi);
    (tw, defect(tw).1)
}

#[test]
fn five_nodes_match_bisection_oracle() {
    let (w, l) = (ladder(16.0, 5), ladder(16.0, 5));
    let point = solve_fixed_point(5, &w, &l, &FixedPointSettings::default()).unwrap();
    let (tw, tl) = oracle(5, w.mean_backoffs(), l.mean_backoffs());
    assert!((point.tau_wifi - tw).abs() < 1e-8, "{} vs {tw}", point.tau_wifi);
    assert!((point.tau_sbs - tl).abs() < 1e-8, "{} vs {tl}", point.tau_sbs);
    let expected = tl * (1.0 - tw).powi(5);
    assert!((success_prob(&point, 5) - expected).abs() < 1e-8);
}

#[test]
fn success_decreases_with_wifi_count() {
    let (w, l) = (ladder(16.0, 5), ladder(16.0, 5));
    let s = FixedPointSettings::default();
    let succ: Vec<f64> = (0..=30)
        .map(|n| success_prob(&solve_fixed_point(n, &w, &l, &s).unwrap(), n))
        .collect();
    for (n, pair) in succ.windows(2).enumerate() {
        assert!(pair[1] <= pair[0] + 1e-9, "P_suc({}) = {} > P_suc({n}) = {}", n + 1, pair[1], pair[0]);
    }
    assert!(succ[1] > succ[10]);
}

#[test]
fn starts_agree_on_default_ladders() {
    let (w, l) = (ladder(16.0, 5), ladder(16.0, 5));
    let s = FixedPointSettings::default();
    for n in 1..=30 {
        let probe = probe_multiplicity(n, &w, &l, &s).unwrap();
        assert_eq!(probe.points.len(), 3);
        assert!(probe.is_unique(s.tol), "N = {n}: spread {:.3e}", probe.spread);
    }
}

proptest! {
    #[test]
    fn fixed_point_is_consistent(
        n in 1usize..=30,
        cw_w in prop::sample::select(vec![4.0, 8.0, 16.0, 32.0, 64.0]),
        cw_l in prop::sample::select(vec![4.0, 8.0, 16.0, 32.0, 64.0]),
        stages_w in 1usize..=7,
        stages_l in 1usize..=7,
        start in 0.0f64..0.99,
    ) {
        let (w, l) = (ladder(cw_w, stages_w), ladder(cw_l, stages_l));
        let s = FixedPointSettings { initial_p: start, ..Default::default() };
        let point = solve_fixed_point(n, &w, &l, &s).unwrap();
        for p in [point.tau_wifi, point.tau_sbs, point.p_wifi, point.p_sbs, success_prob(&point, n)] {
            prop_assert!((0.0..=1.0).contains(&p));
        }
        // Re-apply the map and measure the defect independently.
        let tw = attempt_prob(point.p_wifi, &w).unwrap();
        let tl = attempt_prob(point.p_sbs, &l).unwrap();
        let (pw, pl) = collision_probs(tw, tl, n);
        prop_assert!((pw.unwrap() - point.p_wifi).abs() <= 1e-9);
        prop_assert!((pl - point.p_sbs).abs() <= 1e-9);
        let (otw, otl) = oracle(n, w.mean_backoffs(), l.mean_backoffs());
        prop_assert!((point.tau_wifi - otw).abs() < 1e-7);
        prop_assert!((point.tau_sbs - otl).abs() < 1e-7);
    }

    #[test]
    fn attempt_prob_decreases_with_collisions(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let l = ladder(16.0, 5);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(attempt_prob(hi, &l).unwrap() <= attempt_prob(lo, &l).unwrap() + 1e-15);
    }
}
