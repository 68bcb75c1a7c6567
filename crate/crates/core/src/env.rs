//! Random per-slot environment (fading, arrivals, Wi-Fi populations) and the
//! user queue dynamics.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NetworkConfig, QueueVector, SlotState};

/// How many Wi-Fi nodes contend with each SBS in a slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WifiCountModel {
    Fixed { n: usize },
    /// Uniform integer on `[min, max]`, redrawn independently per SBS and slot.
    Uniform { min: usize, max: usize },
}

impl WifiCountModel {
    pub fn max(&self) -> usize {
        match *self {
            WifiCountModel::Fixed { n } => n,
            WifiCountModel::Uniform { max, .. } => max,
        }
    }
}

/// Mean power gains (`E|h|²`) of the links in the abstract topology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanGains {
    /// SBS to its own users, licensed band.
    pub own_licensed: f64,
    /// SBS to another cell's users, licensed band.
    pub cross_licensed: f64,
    /// SBS to the macrocell user.
    pub macro_user: f64,
    /// SBS to its own users, unlicensed band.
    pub own_unlicensed: f64,
}

impl Default for MeanGains {
    fn default() -> Self {
        Self { own_licensed: 1e-10, cross_licensed: 1e-12, macro_user: 3e-12, own_unlicensed: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    /// Mean Poisson packet count per user per slot (`λ`).
    pub arrival_rate: f64,
    pub packet_size_bits: f64,
    pub mean_gains: MeanGains,
    pub wifi_count: WifiCountModel,
    pub seed: u64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            arrival_rate: 1.25,
            packet_size_bits: 1e6,
            mean_gains: MeanGains::default(),
            wifi_count: WifiCountModel::Uniform { min: 1, max: 10 },
            seed: 1,
        }
    }
}

impl EnvParams {
    /// Mean arrival per user per slot, in bits.
    pub fn mean_arrival_bits(&self) -> f64 {
        self.arrival_rate * self.packet_size_bits
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.arrival_rate.is_finite() && self.arrival_rate >= 0.0) {
            return Err(format!("arrival rate must be ≥ 0, got {}", self.arrival_rate));
        }
        if !(self.packet_size_bits > 0.0) {
            return Err("packet size must be > 0".into());
        }
        let g = &self.mean_gains;
        if [g.own_licensed, g.cross_licensed, g.macro_user, g.own_unlicensed]
            .iter()
            .any(|m| !(m.is_finite() && *m > 0.0))
        {
            return Err("mean gains must be > 0".into());
        }
        if let WifiCountModel::Uniform { min, max } = self.wifi_count {
            if min > max {
                return Err(format!("wifi count range [{min}, {max}] is empty"));
            }
        }
        Ok(())
    }
}

fn slot_rng(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    rng
}

fn exp_gain(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    // Rayleigh amplitude ⇒ exponentially distributed power gain.
    Exp::new(1.0 / mean).map(|d| d.sample(rng)).unwrap_or(0.0)
}

/// Draws slot `t`. The result depends only on `(env.seed, t)` and the
/// dimensions of `cfg`.
pub fn sample_slot(env: &EnvParams, cfg: &NetworkConfig, t: u64) -> SlotState {
    let dims = cfg.dims();
    let mut rng = slot_rng(env.seed, t);
    let g = env.mean_gains;

    let mut licensed_gain = Vec::with_capacity(dims.licensed * dims.num_sbs() * dims.num_users());
    for _l in 0..dims.licensed {
        for j in 0..dims.num_sbs() {
            for u in 0..dims.num_users() {
                let mean = if dims.sbs_of(u) == j { g.own_licensed } else { g.cross_licensed };
                licensed_gain.push(exp_gain(&mut rng, mean));
            }
        }
    }
    let macro_gain = (0..dims.licensed * dims.num_sbs())
        .map(|_| exp_gain(&mut rng, g.macro_user))
        .collect();
    let unlicensed_gain = (0..dims.unlicensed_len())
        .map(|_| exp_gain(&mut rng, g.own_unlicensed))
        .collect();

    let poisson = Poisson::new(env.arrival_rate).ok();
    let arrivals = (0..dims.num_users())
        .map(|_| match &poisson {
            Some(d) => d.sample(&mut rng) * env.packet_size_bits,
            None => 0.0,
        })
        .collect();

    let wifi_count = (0..dims.num_sbs())
        .map(|_| match env.wifi_count {
            WifiCountModel::Fixed { n } => n,
            WifiCountModel::Uniform { min, max } => rng.gen_range(min..=max),
        })
        .collect();

    SlotState { t, licensed_gain, macro_gain, unlicensed_gain, arrivals, wifi_count }
}

/// One step of the queue recursion: serve up to `served` bits, then add the
/// arrivals.
pub fn update_queue(q: f64, served: f64, arrived: f64) -> f64 {
    (q - served).max(0.0) + arrived
}

pub fn update_queues(q: &QueueVector, served: &[f64], arrived: &[f64]) -> QueueVector {
    QueueVector(
        q.0.iter()
            .zip(served)
            .zip(arrived)
            .map(|((&q, &r), &a)| update_queue(q, r, a))
            .collect(),
    )
}

#[derive(Debug, Error, PartialEq)]
pub enum StabilityError {
    #[error("trace has {0} slots, at least {MIN_TRACE} required")]
    TooShort(usize),
}

pub const MIN_TRACE: usize = 100;

/// Per-slot history of backlogs (after the update), arrivals and service.
#[derive(Debug, Clone, Default, Serialize)]
pub struct QueueTrace {
    pub queues: Vec<QueueVector>,
    pub arrivals: Vec<Vec<f64>>,
    pub served: Vec<Vec<f64>>,
}

impl QueueTrace {
    pub fn push(&mut self, queue: QueueVector, arrivals: Vec<f64>, served: Vec<f64>) {
        self.queues.push(queue);
        self.arrivals.push(arrivals);
        self.served.push(served);
    }

    pub fn len(&self) -> usize {
        self.queues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.is_empty()
    }

    /// Mean per-user backlog in each slot.
    pub fn mean_backlog(&self) -> Vec<f64> {
        self.queues.iter().map(QueueVector::mean).collect()
    }

    /// Finite-horizon time average of the mean per-user backlog.
    pub fn time_average(&self) -> f64 {
        mean(&self.mean_backlog())
    }

    /// Writes `t,user,Q,A,R` rows, all in bits.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "user", "Q", "A", "R"])?;
        for (t, ((q, a), r)) in self.queues.iter().zip(&self.arrivals).zip(&self.served).enumerate() {
            for u in 0..q.0.len() {
                w.write_record(&[
                    t.to_string(),
                    u.to_string(),
                    q.0[u].to_string(),
                    a[u].to_string(),
                    r[u].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityMetric {
    pub time_avg_backlog: f64,
    /// Least-squares slope of the backlog over the final 20% of slots.
    pub slope_tail: f64,
}

impl StabilityMetric {
    pub fn is_stable(&self, eps_slope: f64) -> bool {
        self.slope_tail <= eps_slope
    }
}

pub fn stability_metric(trace: &QueueTrace) -> Result<StabilityMetric, StabilityError> {
    stability_of_series(&trace.mean_backlog())
}

/// Same as [`stability_metric`] for an explicit backlog series.
pub fn stability_of_series(series: &[f64]) -> Result<StabilityMetric, StabilityError> {
    if series.len() < MIN_TRACE {
        return Err(StabilityError::TooShort(series.len()));
    }
    let tail_start = series.len() - series.len() / 5;
    let tail = &series[tail_start..];
    let xs: Vec<f64> = (tail_start..series.len()).map(|t| t as f64).collect();
    Ok(StabilityMetric { time_avg_backlog: mean(series), slope_tail: linear_fit(&xs, tail).slope })
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { 1.0 - (syy - slope * sxy) / syy } else { 1.0 };
    LinearFit { intercept, slope, r_squared }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::paper_defaults;
    use proptest::prelude::*;

    #[test]
    fn queue_examples() {
        assert_eq!(update_queue(10.0, 4.0, 3.0), 9.0);
        assert_eq!(update_queue(2.0, 5.0, 1.0), 1.0);
        assert_eq!(update_queue(0.0, 0.0, 7.0), 7.0);
    }

    proptest! {
        #[test]
        fn queue_never_negative(q in 0.0f64..1e9, r in 0.0f64..1e9, a in 0.0f64..1e9) {
            prop_assert!(update_queue(q, r, a) >= 0.0);
        }

        #[test]
        fn queue_monotonicity(q in 0.0f64..1e6, r in 0.0f64..1e6, a in 0.0f64..1e6, d in 0.0f64..1e3) {
            prop_assert!(update_queue(q + d, r, a) >= update_queue(q, r, a));
            prop_assert!(update_queue(q, r, a + d) >= update_queue(q, r, a));
            prop_assert!(update_queue(q, r + d, a) <= update_queue(q, r, a));
        }
    }

    #[test]
    fn zero_arrival_rate_means_no_arrivals() {
        let cfg = paper_defaults().network;
        let env = EnvParams { arrival_rate: 0.0, ..Default::default() };
        for t in 0..50 {
            assert!(sample_slot(&env, &cfg, t).arrivals.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn fixed_wifi_population() {
        let cfg = paper_defaults().network;
        let env = EnvParams { wifi_count: WifiCountModel::Fixed { n: 5 }, ..Default::default() };
        for t in 0..50 {
            assert_eq!(sample_slot(&env, &cfg, t).wifi_count, vec![5; 3]);
        }
    }

    #[test]
    fn uniform_wifi_population_in_range() {
        let cfg = paper_defaults().network;
        let env = EnvParams::default();
        let mut seen = [false; 11];
        for t in 0..500 {
            for n in sample_slot(&env, &cfg, t).wifi_count {
                assert!((1..=10).contains(&n));
                seen[n] = true;
            }
        }
        assert!(seen[1..].iter().all(|&s| s));
    }

    #[test]
    fn empirical_mean_gain() {
        let cfg = paper_defaults().network;
        let env = EnvParams::default();
        let dims = cfg.dims();
        let (mut sum, mut count) = (0.0, 0usize);
        let mut t = 0;
        while count < 100_000 {
            let s = sample_slot(&env, &cfg, t);
            for l in 0..dims.licensed {
                for u in 0..dims.num_users() {
                    sum += s.own_licensed_gain(&dims, l, u);
                    count += 1;
                }
            }
            t += 1;
        }
        let m = sum / count as f64;
        assert!((m - env.mean_gains.own_licensed).abs() / env.mean_gains.own_licensed < 0.02, "{m}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let cfg = paper_defaults().network;
        let env = EnvParams::default();
        for t in [0, 7, 4999] {
            assert_eq!(sample_slot(&env, &cfg, t), sample_slot(&env, &cfg, t));
        }
        assert_ne!(sample_slot(&env, &cfg, 3), sample_slot(&env, &cfg, 4));
        let other = EnvParams { seed: 2, ..env.clone() };
        assert_ne!(sample_slot(&env, &cfg, 3), sample_slot(&other, &cfg, 3));
    }

    #[test]
    fn stability_examples() {
        let zero = vec![0.0; 200];
        let m = stability_of_series(&zero).unwrap();
        assert_eq!((m.time_avg_backlog, m.slope_tail), (0.0, 0.0));

        let ramp: Vec<f64> = (0..500).map(|t| t as f64).collect();
        assert!((stability_of_series(&ramp).unwrap().slope_tail - 1.0).abs() < 1e-12);

        assert_eq!(stability_of_series(&[1.0; 99]), Err(StabilityError::TooShort(99)));
    }

    #[test]
    fn simulated_stable_queue_has_flat_tail() {
        // Service 2 per slot against Poisson(1) arrivals.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let poisson = Poisson::new(1.0).unwrap();
        let mut q = 0.0;
        let series: Vec<f64> = (0..5000)
            .map(|_| {
                q = update_queue(q, 2.0, poisson.sample(&mut rng));
                q
            })
            .collect();
        let m = stability_of_series(&series).unwrap();
        assert!(m.slope_tail <= 0.01, "{m:?}");
    }

    #[test]
    fn trace_csv_layout() {
        let mut trace = QueueTrace::default();
        trace.push(QueueVector(vec![1.0, 2.0]), vec![3.0, 4.0], vec![5.0, 6.0]);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,user,Q,A,R\n0,0,1,3,5\n0,1,2,4,6\n");
    }
}
