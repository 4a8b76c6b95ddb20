//! TOML scenario schema and its translation into core scenarios.
//!
//! The schema is strict: unknown fields anywhere are rejected, and fields
//! that do not apply to the chosen strategy kind are errors rather than
//! silently ignored.

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use servesim_core::profiles::{self, PairProfile};
use servesim_core::scaling::ScalingPolicy;
use servesim_core::scenario::{ClusterSpec, ScalingSpec, Scenario, StrategySpec, WorkloadSource};
use servesim_core::workload::{self, LengthDistribution, RatePlan, RateStep, SloConfig, WorkloadSpec};
use std::path::{Path, PathBuf};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub horizon: f64,
    /// Optional when the workload names a preset (which carries its SLOs).
    pub slo: Option<SloTable>,
    pub workload: WorkloadTable,
    pub cluster: ClusterTable,
    pub strategy: StrategyTable,
    pub scaling: Option<ScalingTable>,
    pub sweep: Option<SweepTable>,
}

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloTable {
    pub ttft: f64,
    pub tpot: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadTable {
    /// Bundled dataset preset (`alpaca`, `sharegpt`, `longbench`).
    pub preset: Option<String>,
    /// Explicit length statistics, exclusive with `preset`.
    pub input_len: Option<LenTable>,
    pub output_len: Option<LenTable>,
    /// Trace file path, exclusive with synthetic generation.
    pub trace: Option<PathBuf>,
    pub rate: Option<f64>,
    #[serde(default)]
    pub ramp: Vec<RampStep>,
    pub duration: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LenTable {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampStep {
    pub start: f64,
    pub rate: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterTable {
    /// Bundled profile name or a path to a profile TOML file.
    pub profile: String,
    pub instances: usize,
    pub tp_degree: u64,
    #[serde(default)]
    pub comm_overhead_fraction: f64,
    #[serde(default)]
    pub switch_overhead: f64,
    #[serde(default)]
    pub per_layer_overhead: f64,
    pub kv_capacity_bytes: Option<u64>,
    #[serde(default = "default_batch_tokens")]
    pub max_prefill_batch_tokens: u64,
    pub macros: Option<Vec<Vec<usize>>>,
}

fn default_batch_tokens() -> u64 {
    4096
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyTable {
    pub kind: String,
    // padg
    pub status_period: Option<f64>,
    pub staleness_factor: Option<f64>,
    pub reservation_tokens: Option<u64>,
    // nodg-hybrid
    pub chunk_size: Option<u64>,
    pub token_budget: Option<u64>,
    // fudg
    pub prefill_instances: Option<usize>,
    pub link_bandwidth: Option<f64>,
    pub hops: Option<u8>,
    pub transfer_latency: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingTable {
    pub n_lower: usize,
    pub n_upper: usize,
    #[serde(default = "default_target_attainment")]
    pub target_attainment: f64,
    #[serde(default = "default_scale_up_window")]
    pub scale_up_window: f64,
    #[serde(default = "default_scale_down_util")]
    pub scale_down_util: f64,
    #[serde(default = "default_scale_down_sustain")]
    pub scale_down_sustain: f64,
    #[serde(default = "default_migration_overhead")]
    pub migration_overhead: f64,
    #[serde(default = "default_reinit_cost")]
    pub reinit_cost: f64,
    #[serde(default = "default_cooldown")]
    pub cooldown: f64,
    pub max_instances: usize,
    #[serde(default = "default_sample_period")]
    pub sample_period: f64,
}

fn default_target_attainment() -> f64 {
    0.9
}
fn default_scale_up_window() -> f64 {
    30.0
}
fn default_scale_down_util() -> f64 {
    0.4
}
fn default_scale_down_sustain() -> f64 {
    60.0
}
fn default_migration_overhead() -> f64 {
    0.1
}
fn default_reinit_cost() -> f64 {
    180.0
}
fn default_cooldown() -> f64 {
    30.0
}
fn default_sample_period() -> f64 {
    30.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepTable {
    pub rate_lo: f64,
    pub rate_hi: f64,
    pub rate_step: f64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_hybrid_chunk")]
    pub hybrid_chunk_size: u64,
    #[serde(default = "default_hybrid_budget")]
    pub hybrid_token_budget: u64,
    pub fudg_link_bandwidth: Option<f64>,
    #[serde(default = "default_hops")]
    pub fudg_hops: u8,
    #[serde(default)]
    pub fudg_transfer_latency: f64,
}

fn default_strategies() -> Vec<String> {
    vec!["padg".into(), "nodg-separate".into()]
}
fn default_hybrid_chunk() -> u64 {
    256
}
fn default_hybrid_budget() -> u64 {
    512
}
fn default_hops() -> u8 {
    1
}

pub fn load(path: &Path) -> Result<ConfigFile> {
    let contents = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config: ConfigFile =
        toml::from_str(&contents).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(config)
}

fn load_profile(name: &str, config_dir: &Path) -> Result<PairProfile> {
    if profiles::BUNDLED.contains(&name) {
        return Ok(profiles::bundled(name)?);
    }
    let path = config_dir.join(name);
    if path.exists() {
        let contents = std::fs::read_to_string(&path)
            .with_context(|| format!("reading profile {}", path.display()))?;
        return Ok(profiles::parse(&contents)?);
    }
    bail!(
        "cluster.profile: `{name}` is neither a bundled profile ({}) nor a file",
        profiles::BUNDLED.join(", ")
    )
}

impl ConfigFile {
    /// Resolve into a runnable core scenario. `config_dir` anchors relative
    /// trace/profile paths.
    pub fn to_scenario(&self, config_dir: &Path) -> Result<Scenario> {
        let preset = match &self.workload.preset {
            Some(name) => Some(
                workload::preset(name)
                    .ok_or_else(|| anyhow!("workload.preset: unknown preset `{name}`"))?,
            ),
            None => None,
        };

        let slo = match (&self.slo, preset) {
            (Some(table), _) => SloConfig { slo_ttft: table.ttft, slo_tpot: table.tpot },
            (None, Some(p)) => p.slo,
            (None, None) => bail!("slo: required unless workload.preset is set"),
        };

        let workload = self.resolve_workload(preset, config_dir)?;
        let profile = load_profile(&self.cluster.profile, config_dir)?;
        let cluster = ClusterSpec {
            profile,
            instances: self.cluster.instances,
            tp_degree: self.cluster.tp_degree,
            comm_overhead_fraction: self.cluster.comm_overhead_fraction,
            switch_overhead: self.cluster.switch_overhead,
            per_layer_overhead: self.cluster.per_layer_overhead,
            kv_capacity_bytes: self.cluster.kv_capacity_bytes,
            max_prefill_batch_tokens: self.cluster.max_prefill_batch_tokens,
            macros: self.cluster.macros.clone(),
        };
        let strategy = self.resolve_strategy()?;
        let scaling = self.scaling.as_ref().map(|s| ScalingSpec {
            policy: ScalingPolicy {
                n_lower: s.n_lower,
                n_upper: s.n_upper,
                target_attainment: s.target_attainment,
                scale_up_window: s.scale_up_window,
                scale_down_util: s.scale_down_util,
                scale_down_sustain: s.scale_down_sustain,
                migration_overhead: s.migration_overhead,
                reinit_cost: s.reinit_cost,
                cooldown: s.cooldown,
            },
            max_instances: s.max_instances,
            sample_period: s.sample_period,
        });

        Ok(Scenario {
            name: self.name.clone(),
            seed: self.seed,
            horizon: self.horizon,
            slo,
            workload,
            strategy,
            cluster,
            scaling,
            audit: false,
        })
    }

    fn resolve_workload(
        &self,
        preset: Option<&'static workload::Preset>,
        config_dir: &Path,
    ) -> Result<WorkloadSource> {
        let w = &self.workload;
        if let Some(trace_path) = &w.trace {
            if preset.is_some() || w.input_len.is_some() || w.rate.is_some() || !w.ramp.is_empty() {
                bail!("workload.trace: exclusive with preset/input_len/rate/ramp");
            }
            let path = config_dir.join(trace_path);
            let requests = workload::load_trace(&path)
                .with_context(|| format!("workload.trace: loading {}", path.display()))?;
            return Ok(WorkloadSource::Trace(requests));
        }

        let duration = w
            .duration
            .ok_or_else(|| anyhow!("workload.duration: required for synthetic workloads"))?;
        let rate = match (w.rate, w.ramp.is_empty()) {
            (Some(r), true) => RatePlan::Constant(r),
            (None, false) => RatePlan::Steps(
                w.ramp
                    .iter()
                    .map(|s| RateStep { start: s.start, rate: s.rate })
                    .collect(),
            ),
            (Some(_), false) => bail!("workload: rate and ramp are exclusive"),
            (None, true) => bail!("workload.rate: required (or provide workload.ramp)"),
        };

        let (input_len, output_len) = match (preset, &w.input_len, &w.output_len) {
            (Some(p), None, None) => (
                LengthDistribution::fit(p.input_mean, p.input_median)?,
                LengthDistribution::fit(p.output_mean, p.output_median)?,
            ),
            (None, Some(i), Some(o)) => (
                LengthDistribution::fit(i.mean, i.median)
                    .context("workload.input_len")?,
                LengthDistribution::fit(o.mean, o.median)
                    .context("workload.output_len")?,
            ),
            (Some(_), _, _) => bail!("workload.preset: exclusive with input_len/output_len"),
            _ => bail!("workload: provide preset, or both input_len and output_len"),
        };

        Ok(WorkloadSource::Synthetic(WorkloadSpec {
            name: preset.map(|p| p.name.to_string()).unwrap_or_else(|| self.name.clone()),
            rate,
            duration,
            input_len,
            output_len,
            seed: self.seed,
        }))
    }

    fn resolve_strategy(&self) -> Result<StrategySpec> {
        let s = &self.strategy;
        let forbid = |cond: bool, field: &str, kind: &str| -> Result<()> {
            if cond {
                bail!("strategy.{field}: not valid for strategy kind `{kind}`");
            }
            Ok(())
        };
        match s.kind.as_str() {
            "padg" => {
                forbid(s.chunk_size.is_some(), "chunk_size", "padg")?;
                forbid(s.token_budget.is_some(), "token_budget", "padg")?;
                forbid(s.prefill_instances.is_some(), "prefill_instances", "padg")?;
                forbid(s.link_bandwidth.is_some(), "link_bandwidth", "padg")?;
                Ok(StrategySpec::Padg {
                    status_period: s.status_period.unwrap_or(0.05),
                    staleness_factor: s.staleness_factor.unwrap_or(4.0),
                    reservation_tokens: s.reservation_tokens,
                })
            }
            "nodg-separate" => Ok(StrategySpec::NodgSeparate),
            "nodg-hybrid" => Ok(StrategySpec::NodgHybrid {
                chunk_size: s.chunk_size.unwrap_or(256),
                token_budget: s.token_budget.unwrap_or(512),
            }),
            "fudg" => Ok(StrategySpec::Fudg {
                prefill_instances: s
                    .prefill_instances
                    .ok_or_else(|| anyhow!("strategy.prefill_instances: required for fudg"))?,
                link_bandwidth: s
                    .link_bandwidth
                    .ok_or_else(|| anyhow!("strategy.link_bandwidth: required for fudg"))?,
                hops: s.hops.unwrap_or(1),
                transfer_latency: s.transfer_latency.unwrap_or(0.0),
            }),
            other => bail!(
                "strategy.kind: unknown strategy `{other}` (expected padg, nodg-separate, nodg-hybrid, fudg)"
            ),
        }
    }

    /// Strategy spec by name, for `--strategy` overrides and sweep
    /// comparisons. Kind-specific parameters come from `[strategy]` when the
    /// kinds match, then from `[sweep]`, then from defaults.
    pub fn strategy_variant(&self, name: &str) -> Result<StrategySpec> {
        let sweep = self.sweep.as_ref();
        Ok(match name {
            "padg" => StrategySpec::Padg {
                status_period: self.strategy.status_period.unwrap_or(0.05),
                staleness_factor: self.strategy.staleness_factor.unwrap_or(4.0),
                reservation_tokens: self.strategy.reservation_tokens,
            },
            "nodg-separate" => StrategySpec::NodgSeparate,
            "nodg-hybrid" => StrategySpec::NodgHybrid {
                chunk_size: self
                    .strategy
                    .chunk_size
                    .or(sweep.map(|s| s.hybrid_chunk_size))
                    .unwrap_or(256),
                token_budget: self
                    .strategy
                    .token_budget
                    .or(sweep.map(|s| s.hybrid_token_budget))
                    .unwrap_or(512),
            },
            "fudg" => {
                let link = self
                    .strategy
                    .link_bandwidth
                    .or(sweep.and_then(|s| s.fudg_link_bandwidth))
                    .ok_or_else(|| {
                        anyhow!("fudg: link_bandwidth required (strategy.link_bandwidth or sweep.fudg_link_bandwidth)")
                    })?;
                StrategySpec::Fudg {
                    prefill_instances: self.strategy.prefill_instances.unwrap_or(1),
                    link_bandwidth: link,
                    hops: self
                        .strategy
                        .hops
                        .or(sweep.map(|s| s.fudg_hops))
                        .unwrap_or(1),
                    transfer_latency: self
                        .strategy
                        .transfer_latency
                        .or(sweep.map(|s| s.fudg_transfer_latency))
                        .unwrap_or(0.0),
                }
            }
            other => bail!("strategy: unknown strategy `{other}`"),
        })
    }
}
