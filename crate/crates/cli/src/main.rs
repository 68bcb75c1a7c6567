//! `laa-sim`: runs single episodes, control-parameter sweeps, the comparison
//! against the per-slot minimum-power baseline, and the contention table.
//!
//! Exit status: 0 on success, 1 on configuration or I/O errors, 2 when the
//! contention model or solver fails outright. Log verbosity follows
//! `RUST_LOG` (default `warn`).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use laa_core::baselines::PolicyId;
use laa_core::config::{self, ConfigError, ExperimentConfig};
use laa_core::csma::{solve_fixed_point, success_prob, CsmaError, FixedPointSettings};
use laa_core::harness::{self, HarnessError, RunMetrics};

#[derive(Parser)]
#[command(name = "laa-sim", version, about = "LAA/Wi-Fi coexistence power-delay simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if needed).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the environment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the horizon in slots.
    #[arg(long)]
    slots: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// One episode of a single policy.
    Run {
        #[command(flatten)]
        common: Common,
        /// `proposed`, `proposed:V`, `pcmps` or `zero`.
        #[arg(long, default_value = "proposed")]
        policy: PolicyId,
        /// Control parameter of the proposed policy.
        #[arg(long = "V")]
        v: Option<f64>,
        /// Also write every user's backlog to the series CSV.
        #[arg(long)]
        per_user: bool,
    },
    /// Proposed policy over a list of control parameters.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated control parameters (default: the config's list).
        #[arg(long = "V", value_delimiter = ',')]
        v: Vec<f64>,
    },
    /// Proposed policy against the per-slot minimum-power baseline.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long = "V", value_delimiter = ',')]
        v: Vec<f64>,
    },
    /// Contention fixed point for every Wi-Fi count up to `--n-max`.
    CsmaTable {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Largest Wi-Fi node count (default: the config's maximum).
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Checks a config and prints the validation report.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<CsmaError>().is_some() {
            return 2;
        }
        if let Some(HarnessError::Csma(_)) = cause.downcast_ref::<HarnessError>() {
            return 2;
        }
    }
    1
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    match path {
        Some(p) => config::load(p),
        None => Ok(config::paper_defaults()),
    }
}

fn prepare(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.env.seed = seed;
    }
    if let Some(slots) = common.slots {
        if slots == 0 {
            bail!("--slots must be positive");
        }
        cfg.run.slots = slots;
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn summary(m: &RunMetrics) -> String {
    format!(
        "{}: power {:.3} W, delay {:.3} slots, backlog {:.4e} bits, infeasible slots {}",
        m.policy, m.avg_power, m.avg_delay, m.avg_queue, m.infeasible_slot_count
    )
}

fn v_list(given: Vec<f64>, cfg: &ExperimentConfig) -> Vec<f64> {
    if given.is_empty() {
        cfg.run.v_list.clone()
    } else {
        given
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, policy, v, per_user } => {
            let cfg = prepare(&common)?;
            let policy = match (policy, v) {
                (PolicyId::Proposed { .. }, Some(v)) => PolicyId::Proposed { v },
                (PolicyId::Proposed { v }, None) if v.is_nan() => PolicyId::Proposed { v: cfg.network.control_param },
                (other, _) => other,
            };
            let metrics = harness::run_episode(&cfg, policy, cfg.run.slots)?;
            let v = match policy {
                PolicyId::Proposed { v } => Some(v),
                _ => None,
            };
            harness::write_series_csv(&[(v, &metrics)], per_user, create(&common.out, "series.csv")?)?;
            write_json(&common.out, "run.json", &metrics)?;
            println!("{}", summary(&metrics));
        }
        Command::Sweep { common, v } => {
            let cfg = prepare(&common)?;
            let vs = v_list(v, &cfg);
            let sweep = harness::sweep_v(&cfg, &vs, cfg.run.slots)?;
            sweep.table.write_csv(create(&common.out, "tradeoff.csv")?)?;
            write_json(&common.out, "tradeoff.json", &sweep.table)?;
            let series: Vec<_> = vs.iter().zip(&sweep.runs).map(|(&v, m)| (Some(v), m)).collect();
            harness::write_series_csv(&series, false, create(&common.out, "series.csv")?)?;
            println!("{:>8} {:>12} {:>12} {:>7}", "V", "power (W)", "delay", "stable");
            for r in &sweep.table.rows {
                let stable = r.stable.map_or("?", |b| if b { "yes" } else { "no" });
                println!("{:>8} {:>12.3} {:>12.3} {:>7}", r.v, r.avg_power, r.avg_delay, stable);
            }
            let fit = &sweep.table.power_fit;
            println!(
                "power ≈ {:.3} + {:.3}/V (max residual {:.1}% of range); delay fit R² = {:.3}",
                fit.c0,
                fit.c1,
                100.0 * fit.residual_ratio(),
                sweep.table.delay_fit.r_squared
            );
        }
        Command::Compare { common, v } => {
            let cfg = prepare(&common)?;
            let vs = v_list(v, &cfg);
            let report = harness::compare_policies(&cfg, &vs, cfg.run.slots)?;
            write_json(&common.out, "compare.json", &report)?;
            println!(
                "{}: power {:.3} W, delay {:.3} slots ({} infeasible slots)",
                report.reference_policy, report.reference_power, report.reference_delay, report.reference_infeasible_slots
            );
            println!("dominance window: {:?}", report.dominance_window);
            match &report.matched {
                Some(m) => println!(
                    "matched delay at V = {:.3}: power {:.3} W, {:.1}% below the baseline (published: {:.1}%)",
                    m.v, m.avg_power, m.power_reduction_pct, report.published_reduction_pct
                ),
                None => println!("{}", report.note.as_deref().unwrap_or("no matched-delay point")),
            }
        }
        Command::CsmaTable { config, n_max } => {
            let cfg = load(config.as_deref())?;
            let n_max = n_max.unwrap_or(cfg.env.wifi_count.max());
            let settings = FixedPointSettings::default();
            println!("N,tau_w,tau_l,p_w,p_l,P_suc");
            for n in 0..=n_max {
                let p = solve_fixed_point(n, &cfg.network.wifi_backoff, &cfg.network.sbs_backoff, &settings)?;
                let p_w = if n == 0 { String::new() } else { format!("{:.9}", p.p_wifi) };
                println!(
                    "{n},{:.9},{:.9},{p_w},{:.9},{:.9}",
                    p.tau_wifi,
                    p.tau_sbs,
                    p.p_sbs,
                    success_prob(&p, n)
                );
            }
        }
        Command::Validate { config } => match load(config.as_deref()) {
            Ok(cfg) => println!("{}", cfg.network.validate()),
            Err(ConfigError::Invalid(report)) => {
                println!("{report}");
                bail!("configuration is invalid");
            }
            Err(e) => return Err(e.into()),
        },
    }
    Ok(())
}
