//! servesim — trace-driven simulator of multi-instance LLM serving clusters.
//!
//! Subcommands:
//! - `simulate`: one run, per-request and summary CSVs.
//! - `sweep`: goodput search over a rate grid, comparing strategies.
//! - `scale-demo`: ramped-rate run with mitosis scaling, emitting the scaling
//!   log and a 30-second attainment timeline.
//!
//! Log verbosity follows the `RUST_LOG` environment variable.

mod config;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use servesim_core::metrics::{self, attainment, all_metrics};
use servesim_core::report;
use servesim_core::scenario::{run_scenario, Scenario, StrategySpec, WorkloadSource};
use servesim_core::SimulationResult;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "servesim", version, about = "LLM serving-cluster simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write per-request/summary CSVs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override a constant-rate synthetic workload's request rate.
        #[arg(long)]
        rate: Option<f64>,
        /// Override the strategy (padg, nodg-separate, nodg-hybrid, fudg).
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Goodput search per strategy over the configured rate grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to a single attainment percentile (e.g. 0.9).
        #[arg(long)]
        percentile: Option<f64>,
    },
    /// Ramp the request rate with mitosis scaling active.
    ScaleDemo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Exit codes: 0 success, 1 runtime failure, 2 validation failure,
/// 3 horizon reached with unfinished requests.
fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { config, out, seed, rate, strategy } => {
            cmd_simulate(&config, &out, seed, rate, strategy.as_deref())
        }
        Command::Sweep { config, out, seed, percentile } => {
            cmd_sweep(&config, &out, seed, percentile)
        }
        Command::ScaleDemo { config, out, seed } => cmd_scale_demo(&config, &out, seed),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(CmdError::Validation(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(CmdError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

enum CmdError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn validation<T>(r: Result<T>) -> std::result::Result<T, CmdError> {
    r.map_err(CmdError::Validation)
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, CmdError> {
    r.map_err(CmdError::Runtime)
}

fn prepare_scenario(
    config_path: &Path,
    seed: Option<u64>,
) -> Result<(config::ConfigFile, Scenario)> {
    let file = config::load(config_path)?;
    let dir = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut scenario = file.to_scenario(&dir)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    scenario.validate().map_err(|e| anyhow!("{e}"))?;
    Ok((file, scenario))
}

fn write(out_dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn mean_rate(scenario: &Scenario) -> f64 {
    match &scenario.workload {
        WorkloadSource::Synthetic(spec) => spec.rate.mean_rate(spec.duration),
        WorkloadSource::Trace(reqs) => {
            let span = reqs
                .last()
                .map(|r| r.arrival_time)
                .unwrap_or(0.0)
                .max(f64::MIN_POSITIVE);
            reqs.len() as f64 / span
        }
    }
}

fn write_run_outputs(out: &Path, scenario: &Scenario, result: &SimulationResult) -> Result<()> {
    write(out, "requests.csv", &report::per_request_csv(result, &scenario.slo))?;
    write(
        out,
        "summary.csv",
        &report::summary_csv(&scenario.name, mean_rate(scenario), result, &scenario.slo),
    )?;
    write(out, "utilization.csv", &report::utilization_csv(result))?;
    if !result.routing_log.is_empty() {
        write(out, "routing.csv", &report::routing_csv(&result.routing_log))?;
    }
    if !result.scaling_log.is_empty() {
        write(out, "scaling.csv", &report::scaling_csv(&result.scaling_log))?;
    }
    Ok(())
}

fn print_summary(scenario: &Scenario, result: &SimulationResult) {
    let metrics = all_metrics(&result.records, &scenario.slo);
    let frac = |p: f64| attainment(&metrics, p).map(|(f, _)| f).unwrap_or(f64::NAN);
    println!("scenario {} [{}]", scenario.name, result.strategy);
    println!(
        "  requests {} completed {} unfinished {} makespan {:.1}s events {}",
        result.records.len(),
        result.records.len() - result.unfinished,
        result.unfinished,
        result.makespan,
        result.events_processed,
    );
    println!(
        "  attainment p50 {:.4} p90 {:.4} p99 {:.4}  output tokens/s {:.1}",
        frac(0.50),
        frac(0.90),
        frac(0.99),
        metrics::output_token_rate(result),
    );
}

fn cmd_simulate(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    rate: Option<f64>,
    strategy: Option<&str>,
) -> std::result::Result<u8, CmdError> {
    let (file, mut scenario) = validation(prepare_scenario(config_path, seed))?;
    if let Some(name) = strategy {
        scenario.strategy = validation(file.strategy_variant(name))?;
        validation(scenario.validate().map_err(|e| anyhow!("{e}")))?;
    }
    if let Some(rate) = rate {
        scenario = validation(
            scenario
                .with_rate(rate, scenario.seed)
                .map_err(|e| anyhow!("{e}")),
        )?;
    }
    info!("running scenario {}", scenario.name);
    let result = runtime(run_scenario(&scenario).map_err(|e| anyhow!("{e}")))?;
    runtime(write_run_outputs(out, &scenario, &result))?;
    print_summary(&scenario, &result);
    Ok(if result.quiescent { 0 } else { 3 })
}

/// One grid pass per strategy variant; goodput at each percentile falls out
/// of the same probes.
struct GridOutcome {
    probes: Vec<(f64, f64, f64)>, // rate, attainment fraction, tokens/s
}

impl GridOutcome {
    fn goodput_at(&self, p: f64) -> Option<(f64, f64)> {
        self.probes
            .iter()
            .filter(|(_, frac, _)| *frac >= p)
            .last()
            .map(|&(rate, _, tokens)| (rate, tokens))
    }
}

fn run_grid(
    template: &Scenario,
    lo: f64,
    hi: f64,
    step: f64,
    base_seed: u64,
) -> Result<GridOutcome> {
    let mut probes = Vec::new();
    let mut rate = lo;
    while rate <= hi + 1e-9 {
        let probe = template
            .with_rate(rate, metrics::probe_seed(base_seed, rate))
            .map_err(|e| anyhow!("{e}"))?;
        let result = run_scenario(&probe).map_err(|e| anyhow!("{e}"))?;
        let ms = all_metrics(&result.records, &template.slo);
        let frac = if ms.is_empty() { 1.0 } else { attainment(&ms, 0.5).map_err(|e| anyhow!("{e}"))?.0 };
        probes.push((rate, frac, metrics::output_token_rate(&result)));
        info!("probe {} rate {rate}: attainment {frac:.4}", template.strategy.name());
        rate += step;
    }
    Ok(GridOutcome { probes })
}

fn cmd_sweep(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    percentile: Option<f64>,
) -> std::result::Result<u8, CmdError> {
    let (file, base) = validation(prepare_scenario(config_path, seed))?;
    let sweep = validation(
        file.sweep
            .as_ref()
            .ok_or_else(|| anyhow!("sweep: table required for the sweep subcommand")),
    )?;
    if !matches!(base.workload, WorkloadSource::Synthetic(_)) {
        return Err(CmdError::Validation(anyhow!(
            "sweep: requires a synthetic workload (rate is swept)"
        )));
    }
    let percentiles = match percentile {
        Some(p) if (0.0..=1.0).contains(&p) => vec![p],
        Some(p) => {
            return Err(CmdError::Validation(anyhow!(
                "--percentile {p}: must be in (0, 1]"
            )))
        }
        None => vec![0.50, 0.90, 0.99],
    };

    let mut csv = String::from(
        "scenario,strategy,params,percentile,goodput_req_s,goodput_tok_s\n",
    );
    let mut table: Vec<String> = Vec::new();
    for name in &sweep.strategies {
        let spec = validation(file.strategy_variant(name))?;
        // FuDG additionally sweeps the prefill/decode split and keeps the
        // best goodput per percentile.
        let splits: Vec<StrategySpec> = if let StrategySpec::Fudg {
            link_bandwidth,
            hops,
            transfer_latency,
            ..
        } = spec
        {
            (1..base.cluster.instances)
                .map(|p| StrategySpec::Fudg {
                    prefill_instances: p,
                    link_bandwidth,
                    hops,
                    transfer_latency,
                })
                .collect()
        } else {
            vec![spec]
        };

        let mut outcomes: Vec<(String, GridOutcome)> = Vec::new();
        for split in splits {
            let params = match &split {
                StrategySpec::Fudg { prefill_instances, .. } => {
                    format!("pd={}:{}", prefill_instances, base.cluster.instances - prefill_instances)
                }
                _ => String::new(),
            };
            let mut variant = base.clone();
            variant.strategy = split;
            validation(variant.validate().map_err(|e| anyhow!("{e}")))?;
            let outcome = runtime(run_grid(
                &variant,
                sweep.rate_lo,
                sweep.rate_hi,
                sweep.rate_step,
                base.seed,
            ))?;
            outcomes.push((params, outcome));
        }

        for &p in &percentiles {
            let best = outcomes
                .iter()
                .filter_map(|(params, o)| o.goodput_at(p).map(|g| (params.clone(), g)))
                .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap());
            match best {
                Some((params, (rate, tokens))) => {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        base.name, name, params, p, rate, tokens
                    ));
                    table.push(format!(
                        "  {name:<14} P{:<4} goodput {rate:>6.2} req/s  {tokens:>9.1} tok/s  {params}",
                        (p * 100.0).round() as u32
                    ));
                }
                None => {
                    csv.push_str(&format!("{},{},,{},,\n", base.name, name, p));
                    table.push(format!(
                        "  {name:<14} P{:<4} no feasible rate in [{}, {}]",
                        (p * 100.0).round() as u32,
                        sweep.rate_lo,
                        sweep.rate_hi
                    ));
                }
            }
        }
    }
    runtime(write(out, "goodput.csv", &csv))?;
    println!("goodput sweep: {}", base.name);
    for line in table {
        println!("{line}");
    }
    Ok(0)
}

fn cmd_scale_demo(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> std::result::Result<u8, CmdError> {
    let (_, scenario) = validation(prepare_scenario(config_path, seed))?;
    if scenario.scaling.is_none() {
        return Err(CmdError::Validation(anyhow!(
            "scaling: table required for scale-demo"
        )));
    }
    let result = runtime(run_scenario(&scenario).map_err(|e| anyhow!("{e}")))?;
    runtime(write_run_outputs(out, &scenario, &result))?;
    let buckets = metrics::attainment_timeline(
        &result.records,
        &scenario.slo,
        servesim_core::engine::UTILIZATION_BUCKET,
        result.makespan,
    );
    runtime(write(out, "timeline.csv", &report::timeline_csv(&buckets)))?;
    print_summary(&scenario, &result);
    println!("  scaling actions: {}", result.scaling_log.len());
    for entry in &result.scaling_log {
        println!(
            "    t={:.1}s {} {:?} -> {:?}",
            entry.time, entry.action, entry.sizes_before, entry.sizes_after
        );
    }
    Ok(if result.quiescent { 0 } else { 3 })
}
