use laa_core::baselines::{pcmps_decide, PolicyId};
use laa_core::csma::{success_prob, SuccessTable, FixedPointSettings};
use laa_core::env::sample_slot;
use laa_core::harness::run_episode;
use laa_core::model::QueueVector;
use laa_core::paper_defaults;
use laa_core::rates::aggregate;
use laa_core::scheduler::decide_allocation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn success_for(cfg: &laa_core::ExperimentConfig, counts: &[usize]) -> Vec<f64> {
    let table = SuccessTable::build(
        cfg.env.wifi_count.max(),
        &cfg.network.wifi_backoff,
        &cfg.network.sbs_backoff,
        &FixedPointSettings::default(),
    )
    .unwrap();
    counts
        .iter()
        .map(|&n| success_prob(table.point(n).unwrap(), n))
        .collect()
}

#[test]
fn pcmps_serves_arrivals_on_feasible_slots() {
    let cfg = paper_defaults();
    let mut feasible = 0;
    for t in 0..40 {
        let state = sample_slot(&cfg.env, &cfg.network, t);
        let p_suc = success_for(&cfg, &state.wifi_count);
        let d = pcmps_decide(&state, &state.arrivals, &cfg.network, &p_suc, &cfg.scheduler);
        if d.flagged {
            continue;
        }
        feasible += 1;
        let bits = aggregate(&d.allocation, &state, &cfg.network, &p_suc).user_bits(cfg.network.slot_length);
        for (u, (r, a)) in bits.iter().zip(&state.arrivals).enumerate() {
            assert!(r >= a, "slot {t}, user {u}: served {r} < arrived {a}");
        }
    }
    assert!(feasible > 0, "every slot was flagged");
}

#[test]
fn rounding_barely_moves_the_objective() {
    let cfg = paper_defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let users = cfg.network.dims().num_users();
    let (mut clean, mut close, total) = (0, 0, 60);
    for t in 0..total {
        let state = sample_slot(&cfg.env, &cfg.network, t);
        let p_suc = success_for(&cfg, &state.wifi_count);
        let queue = QueueVector((0..users).map(|_| rng.gen_range(0.0..2e7)).collect());
        let d = decide_allocation(&state, &queue, &cfg.network, &p_suc, &cfg.scheduler).diagnostics;
        assert!(!d.flagged, "slot {t} flagged");
        if d.penalty_residual > 1e-3 {
            continue;
        }
        clean += 1;
        let relaxed_p2 = d.relaxed_objective - d.penalty * d.penalty_residual;
        if (d.final_objective - relaxed_p2).abs() <= 0.01 * relaxed_p2.abs() {
            close += 1;
        }
    }
    assert!(clean as f64 >= 0.95 * total as f64, "{clean}/{total} slots near-binary");
    assert_eq!(close, clean, "rounding moved P2 by more than 1% on {} slots", clean - close);
}

#[test]
fn littles_law_and_series_averages() {
    let mut cfg = paper_defaults();
    cfg.network.control_param = 5.0;
    let slots = 80;
    let m = run_episode(&cfg, PolicyId::Proposed { v: 5.0 }, slots).unwrap();
    let users = cfg.network.dims().num_users() as f64;
    let arrivals: f64 = (0..slots as u64)
        .map(|t| sample_slot(&cfg.env, &cfg.network, t).arrivals.iter().sum::<f64>())
        .sum::<f64>()
        / (slots as f64 * users);
    let queue = m.series.iter().map(|r| r.sum_q).sum::<f64>() / (slots as f64 * users);
    let power = m.series.iter().map(|r| r.pc_tot).sum::<f64>() / slots as f64;
    assert!((m.avg_arrival - arrivals).abs() <= 1e-9 * arrivals);
    assert!((m.avg_queue - queue).abs() <= 1e-9 * queue);
    assert!((m.avg_power - power).abs() <= 1e-12 * power);
    assert!(m.avg_delay >= 0.0);
    assert!((m.avg_delay * m.avg_arrival - m.avg_queue).abs() <= 0.01 * m.avg_queue);
}
