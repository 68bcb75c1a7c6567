//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The V sweep is computed once and shared.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use laa_core::baselines::PolicyId;
use laa_core::config::paper_defaults;
use laa_core::csma::{solve_fixed_point, BackoffLadder, FixedPointSettings, SuccessTable};
use laa_core::env::{sample_slot, update_queue, update_queues};
use laa_core::harness::{
    compare_with, non_decreasing_within, non_increasing_within, run_episode, sweep_v, Sweep,
};
use laa_core::model::{NetworkConfig, QueueVector};
use laa_core::rates;
use laa_core::scheduler::{
    decide_allocation, initial_point, random_point, run_sca, Layout, SlotModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = took <= budget;
    let pass = out.pass && in_time;
    let timing = if in_time { String::new() } else { format!(" (over the {budget:?} budget)") };
    println!(
        "criterion {id} [{name}]: {} — {} [{:.1}s{timing}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

// --- 1: contention fixed point ---------------------------------------------

/// Attempt rate of a node with per-stage mean backoffs `b` and collision
/// probability `p`: expected attempts over expected backoff slots.
fn attempt(p: f64, b: &[f64]) -> f64 {
    let attempts: f64 = (0..b.len()).map(|j| p.powi(j as i32)).sum();
    let slots: f64 = b.iter().enumerate().map(|(j, bj)| p.powi(j as i32) * bj).sum();
    attempts / slots
}

/// Solves the coupled equations by bisection on `τ_w` alone:
/// `p_l = 1 − (1−τ_w)^N`, `τ_l = τ(p_l)`, `p_w = 1 − (1−τ_w)^{N−1}(1−τ_l)`.
fn csma_oracle(n: usize, wifi: &[f64], sbs: &[f64]) -> [f64; 4] {
    let eval = |tw: f64| {
        let pl = 1.0 - (1.0 - tw).powi(n as i32);
        let tl = attempt(pl, sbs);
        let pw = 1.0 - (1.0 - tw).powi(n as i32 - 1) * (1.0 - tl);
        (tl, pw, pl)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        let (_, pw, _) = eval(mid);
        if attempt(pw, wifi) > mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tw = 0.5 * (lo + hi);
    let (tl, pw, pl) = eval(tw);
    [tw, tl, pw, pl]
}

fn criterion_csma() -> Outcome {
    // 802.11-style ladder: CW 16 doubling over five stages, mean CW/2.
    let ladder: Vec<f64> = (0..5).map(|j| 8.0 * 2f64.powi(j)).collect();
    let default = BackoffLadder::default();
    let mut worst_gap: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    let mut max_iters = 0;
    let mut ok = default.mean_backoffs() == ladder.as_slice();
    for n in [1, 2, 5, 10, 20] {
        match solve_fixed_point(n, &default, &default, &FixedPointSettings::default()) {
            Ok(p) => {
                let o = csma_oracle(n, &ladder, &ladder);
                let got = [p.tau_wifi, p.tau_sbs, p.p_wifi, p.p_sbs];
                let gap = got.iter().zip(o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst_gap = worst_gap.max(gap);
                worst_residual = worst_residual.max(p.residual);
                max_iters = max_iters.max(p.iterations);
                ok &= gap <= 1e-8 && p.residual <= 1e-9 && p.iterations <= 500;
            }
            Err(e) => {
                return Outcome { pass: false, detail: format!("N={n}: {e}") };
            }
        }
    }
    Outcome {
        pass: ok,
        detail: format!(
            "max |solver − oracle| {worst_gap:.2e} (≤ 1e-8), max residual {worst_residual:.2e} (≤ 1e-9), \
             max iterations {max_iters} (≤ 500)"
        ),
    }
}

// --- 2: gradient of the subtracted convex part -------------------------------

fn two_cell_network() -> NetworkConfig {
    let mut net = paper_defaults().network;
    net.num_sbs = 2;
    net.users_per_sbs = vec![1, 1];
    net.licensed_subcarriers = 2;
    net.unlicensed_subcarriers = 2;
    net
}

fn criterion_gradient() -> Outcome {
    let net = two_cell_network();
    let env = paper_defaults().env;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for t in 0..100u64 {
        let state = sample_slot(&env, &net, t);
        let q = QueueVector(vec![rng.gen_range(1e5..5e6), rng.gen_range(1e5..5e6)]);
        let mut model = SlotModel::new(&net, &state, &q, &[0.1, 0.08], 5.0, 1e5);
        model.penalty = model.default_penalty();
        let z = random_point(&model, &mut rng);
        let mut grad = vec![0.0; z.len()];
        model.g_gradient(&z, &mut grad);
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..z.len() {
            let h = 1e-4 * z[i].abs().max(1e-3);
            let mut a = z.clone();
            let mut b = z.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (model.g_value(&a) - model.g_value(&b)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(1e-8 * scale).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
        }
    }
    Outcome { pass: worst <= 1e-5, detail: format!("max relative error {worst:.2e} over 100 points (≤ 1e-5)") }
}

// --- 3: monotone majorize-minimize descent -----------------------------------

fn criterion_descent() -> Outcome {
    let cfg = paper_defaults();
    let net = &cfg.network;
    let settings = &cfg.scheduler;
    let table = SuccessTable::build(cfg.env.wifi_count.max(), &net.wifi_backoff, &net.sbs_backoff, &FixedPointSettings::default())
        .expect("contention table");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut queue = QueueVector::zeros(net.dims().num_users());
    let mut increases = 0;
    let mut runs = 0;
    let mut near_binary = 0;
    let slots = 200;
    for t in 0..slots {
        let state = sample_slot(&cfg.env, net, t);
        let p_suc: Vec<f64> = state.wifi_count.iter().map(|&n| table.success(n).unwrap()).collect();
        let decision = decide_allocation(&state, &queue, net, &p_suc, settings);
        let d = &decision.diagnostics;
        near_binary += usize::from(!d.flagged && d.penalty_residual <= 1e-3);

        // Every start's trajectory, at the penalty the slot settled on.
        let mut model = SlotModel::new(net, &state, &queue, &p_suc, net.control_param, settings.queue_unit_bits);
        model.penalty = d.penalty;
        let layout = Layout::full(model.num_vars());
        let mut starts = vec![initial_point(&model, &state)];
        starts.push(random_point(&model, &mut rng));
        let mut trajectories = vec![d.trajectory.clone()];
        for s in &starts {
            if let Ok(run) = run_sca(&model, &layout, s, settings) {
                trajectories.push(run.objectives);
            }
        }
        for traj in &trajectories {
            runs += 1;
            if traj.windows(2).any(|w| w[1] > w[0] + 1e-8 * w[0].abs().max(1.0)) {
                increases += 1;
            }
        }

        let agg = rates::aggregate(&decision.allocation, &state, net, &p_suc);
        queue = update_queues(&queue, &agg.user_bits(net.slot_length), &state.arrivals);
    }
    let share = near_binary as f64 / slots as f64;
    Outcome {
        pass: increases == 0 && share >= 0.95,
        detail: format!(
            "{increases} of {runs} trajectories increased (slack 1e-8); Σ(x − x²) ≤ 1e-3 on {:.1}% of slots (≥ 95%)",
            100.0 * share
        ),
    }
}

// --- 4: brute-force oracle on a single link ----------------------------------

fn link_objective(net: &NetworkConfig, g_c: f64, g_u: f64, p_suc: f64, q: f64, unit: f64, pc: f64, pu: f64) -> f64 {
    let b = net.subcarrier_bandwidth;
    let rate = b * (1.0 + g_c * pc / net.noise_power).log2() + p_suc * b * (1.0 + g_u * pu / net.noise_power).log2();
    let power = net.static_floor() + net.amplifier_coeff_licensed * pc + net.amplifier_coeff_unlicensed * pu;
    net.control_param * power - (q / unit) * (rate * net.slot_length / unit)
}

fn criterion_grid() -> Outcome {
    let cfg = paper_defaults();
    let mut net = cfg.network.clone();
    net.num_sbs = 1;
    net.users_per_sbs = vec![1];
    net.licensed_subcarriers = 1;
    net.unlicensed_subcarriers = 1;
    let settings = &cfg.scheduler;
    let unit = settings.queue_unit_bits;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut within = 0;
    for t in 0..100u64 {
        let state = sample_slot(&cfg.env, &net, t);
        let q = rng.gen_range(0.0..4e6);
        let p_suc = rng.gen_range(0.03..0.13);
        let (g_c, g_m, g_u) = (state.licensed_gain[0], state.macro_gain[0], state.unlicensed_gain[0]);
        let d = decide_allocation(&state, &QueueVector(vec![q]), &net, &[p_suc], settings);
        let a = &d.allocation;
        let got = link_objective(&net, g_c, g_u, p_suc, q, unit, a.p_licensed[0], a.p_unlicensed[0]);

        let cap_c = net.total_power_cap.min(net.interference_cap / g_m).min(net.big_m);
        let cap_u = net.unlicensed_power_cap.min(net.total_power_cap).min(net.big_m);
        let levels = |on: bool, cap: f64| -> Vec<f64> {
            if on { (0..64).map(|i| cap * i as f64 / 63.0).collect() } else { vec![0.0] }
        };
        let mut best = f64::INFINITY;
        for (xc, xu) in [(false, false), (true, false), (false, true), (true, true)] {
            for &pc in &levels(xc, cap_c) {
                for &pu in &levels(xu, cap_u) {
                    if pc + pu <= net.total_power_cap {
                        best = best.min(link_objective(&net, g_c, g_u, p_suc, q, unit, pc, pu));
                    }
                }
            }
        }
        let excess = (got - best) / best.abs();
        worst = worst.max(excess);
        within += usize::from(got <= best + 0.05 * best.abs());
    }
    Outcome {
        pass: within == 100,
        detail: format!(
            "{within}/100 slots within 5% of the grid optimum; worst (ours − grid)/|grid| = {:+.3}%",
            100.0 * worst
        ),
    }
}

// --- 5–7: sweep, comparison, stability ---------------------------------------

fn criterion_tradeoff(sweep: &Sweep) -> Outcome {
    let t = &sweep.table;
    let powers = t.powers();
    let delays = t.delays();
    let fit = t.power_fit;
    let power_ok = non_increasing_within(&powers, 0.02);
    let fit_ok = fit.residual_ratio() <= 0.10 && fit.c1 >= 0.0;
    let delay_ok = non_decreasing_within(&delays, 0.02) && t.delay_fit.r_squared >= 0.9;
    let rows: Vec<String> =
        t.rows.iter().map(|r| format!("V={}: {:.2} W / {:.2} slots", r.v, r.avg_power, r.avg_delay)).collect();
    Outcome {
        pass: power_ok && fit_ok && delay_ok,
        detail: format!(
            "power non-increasing {power_ok}, fit {:.2} + {:.2}/V residual {:.1}% of range; delay non-decreasing, \
             R² = {:.3}; [{}]",
            fit.c0,
            fit.c1,
            100.0 * fit.residual_ratio(),
            t.delay_fit.r_squared,
            rows.join(", ")
        ),
    }
}

fn criterion_comparison(sweep: &Sweep, vs: &[f64]) -> Outcome {
    let cfg = paper_defaults();
    let slots = cfg.run.slots;
    let reference = match run_episode(&cfg, PolicyId::Pcmps, slots) {
        Ok(m) => m,
        Err(e) => return Outcome { pass: false, detail: format!("baseline run failed: {e}") },
    };
    let report = match compare_with(&cfg, &reference, &sweep.runs, vs, slots) {
        Ok(r) => r,
        Err(e) => return Outcome { pass: false, detail: format!("comparison failed: {e}") },
    };
    let head = format!(
        "PCMPS {:.2} W / {:.2} slots ({} infeasible slots); dominance window V ∈ {:?}",
        report.reference_power, report.reference_delay, report.reference_infeasible_slots, report.dominance_window
    );
    match &report.matched {
        Some(m) => Outcome {
            pass: !report.dominance_window.is_empty() && m.avg_power < report.reference_power,
            detail: format!(
                "{head}; matched delay at V={:.1}: {:.2} W / {:.2} slots, {:.1}% less power (published figure {:.1}%)",
                m.v, m.avg_power, m.avg_delay, m.power_reduction_pct, report.published_reduction_pct
            ),
        },
        None => Outcome {
            pass: false,
            detail: format!("{head}; {}", report.note.as_deref().unwrap_or("no matched-delay point")),
        },
    }
}

fn criterion_stability(sweep: &Sweep, vs: &[f64]) -> Outcome {
    let cfg = paper_defaults();
    let eps = cfg.eps_slope();
    let lambda = cfg.env.mean_arrival_bits();
    let Some(i) = vs.iter().position(|&v| v == 5.0) else {
        return Outcome { pass: false, detail: "V = 5 missing from the sweep".into() };
    };
    let proposed = sweep.runs[i].stability.map(|s| s.slope_tail);
    let zero = run_episode(&cfg, PolicyId::ZeroPower, cfg.run.slots).ok().and_then(|m| m.stability).map(|s| s.slope_tail);
    match (proposed, zero) {
        (Some(p), Some(z)) => Outcome {
            pass: p <= eps && z >= 0.9 * lambda,
            detail: format!(
                "proposed(V=5) tail slope {p:.1} bits/slot (≤ {eps:.0}); zero-power slope {z:.0} (≥ {:.0})",
                0.9 * lambda
            ),
        },
        _ => Outcome { pass: false, detail: "stability metric unavailable".into() },
    }
}

// --- 8: queue arithmetic ------------------------------------------------------

fn criterion_queue() -> Outcome {
    let mut mismatches = 0;
    for q in 0..=10 {
        for r in 0..=10 {
            for a in 0..=10 {
                let direct = if q > r { q - r } else { 0 } + a;
                if update_queue(q as f64, r as f64, a as f64) != direct as f64 {
                    mismatches += 1;
                }
            }
        }
    }
    Outcome { pass: mismatches == 0, detail: format!("{mismatches} mismatches over 1331 grid points") }
}

fn main() -> ExitCode {
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let mut all = true;
    all &= report(1, "contention fixed point", Duration::from_secs(1), criterion_csma);
    all &= report(2, "gradient check", Duration::from_secs(10), criterion_gradient);
    all &= report(3, "SCA descent", minutes(5), criterion_descent);
    all &= report(4, "single-link oracle", minutes(2), criterion_grid);
    all &= report(8, "queue arithmetic", Duration::from_secs(1), criterion_queue);

    let cfg = paper_defaults();
    let vs = cfg.run.v_list.clone();
    let start = Instant::now();
    let sweep = match sweep_v(&cfg, &vs, cfg.run.slots) {
        Ok(s) => s,
        Err(e) => {
            println!("criterion 5 [tradeoff]: FAIL — sweep failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let sweep_time = start.elapsed();
    println!("(shared {}-slot sweep over V = {vs:?} took {:.1}s)", cfg.run.slots, sweep_time.as_secs_f64());
    let remaining = |m: u64| minutes(m).saturating_sub(sweep_time);
    all &= report(5, "power-delay tradeoff", remaining(30), || criterion_tradeoff(&sweep));
    all &= report(6, "policy comparison", remaining(30), || criterion_comparison(&sweep, &vs));
    all &= report(7, "queue stability", minutes(5), || criterion_stability(&sweep, &vs));

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
