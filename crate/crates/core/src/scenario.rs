//! Validated in-memory scenario description and the one-call runner.
//!
//! The CLI parses TOML into this structure; tests build it directly. One
//! scenario fully determines one simulation: workload, SLOs, strategy,
//! cluster layout, optional scaling policy, seed, and horizon.

use crate::cost::ProfileError;
use crate::engine::{SimError, Simulation, SimulationResult, Strategy};
use crate::profiles::PairProfile;
use crate::request::{InstanceId, Request};
use crate::scaling::{MitosisController, ScalingPolicy, TriggerSource};
use crate::sched::fudg::{FudgScheduler, FudgTopology};
use crate::sched::nodg::{NodgHybrid, NodgSeparate};
use crate::sched::padg::{PadgConfig, PadgScheduler};
use crate::workload::{generate, SloConfig, WorkloadError, WorkloadSpec};
use crate::SimInstanceConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Where the request trace comes from.
#[derive(Debug, Clone)]
pub enum WorkloadSource {
    /// Generated from a spec; the scenario seed overrides the spec's.
    Synthetic(WorkloadSpec),
    /// Externally provided, already validated trace.
    Trace(Vec<Request>),
}

/// Cluster of identical instances built from one calibrated profile.
#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub profile: PairProfile,
    pub instances: usize,
    pub tp_degree: u64,
    pub comm_overhead_fraction: f64,
    pub switch_overhead: f64,
    pub per_layer_overhead: f64,
    /// Defaults to the full memory headroom after weights.
    pub kv_capacity_bytes: Option<u64>,
    pub max_prefill_batch_tokens: u64,
    /// PaDG macro layout as instance indices; defaults to one macro holding
    /// every instance.
    pub macros: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub enum StrategySpec {
    Padg {
        status_period: f64,
        staleness_factor: f64,
        /// Output-KV admission reservation; defaults to the workload's mean
        /// output length.
        reservation_tokens: Option<u64>,
    },
    NodgSeparate,
    NodgHybrid { chunk_size: u64, token_budget: u64 },
    Fudg {
        prefill_instances: usize,
        link_bandwidth: f64,
        hops: u8,
        transfer_latency: f64,
    },
}

impl StrategySpec {
    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::Padg { .. } => "padg",
            StrategySpec::NodgSeparate => "nodg-separate",
            StrategySpec::NodgHybrid { .. } => "nodg-hybrid",
            StrategySpec::Fudg { .. } => "fudg",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalingSpec {
    pub policy: ScalingPolicy,
    pub max_instances: usize,
    pub sample_period: f64,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub horizon: f64,
    pub slo: SloConfig,
    pub workload: WorkloadSource,
    pub strategy: StrategySpec,
    pub cluster: ClusterSpec,
    pub scaling: Option<ScalingSpec>,
    /// Re-verify conservation invariants at every event (slower; used by
    /// tests).
    pub audit: bool,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Config(msg));
        self.slo.validate()?;
        if self.horizon <= 0.0 {
            return fail("horizon must be > 0".into());
        }
        if self.cluster.instances == 0 {
            return fail("cluster.instances must be >= 1".into());
        }
        if self.cluster.max_prefill_batch_tokens == 0 {
            return fail("max_prefill_batch_tokens must be >= 1".into());
        }
        self.instance_config()?.validate()?;
        if let WorkloadSource::Synthetic(spec) = &self.workload {
            spec.validate()?;
        }
        match &self.strategy {
            StrategySpec::Padg { status_period, staleness_factor, .. } => {
                if *status_period <= 0.0 || *staleness_factor < 1.0 {
                    return fail("padg: status_period must be > 0 and staleness_factor >= 1".into());
                }
                if let Some(layout) = &self.cluster.macros {
                    let mut seen = vec![false; self.cluster.instances];
                    for idx in layout.iter().flatten() {
                        if *idx >= self.cluster.instances || seen[*idx] {
                            return fail(format!(
                                "cluster.macros: instance index {idx} out of range or repeated"
                            ));
                        }
                        seen[*idx] = true;
                    }
                    if layout.iter().any(|m| m.is_empty()) {
                        return fail("cluster.macros: empty macro".into());
                    }
                }
            }
            StrategySpec::NodgSeparate => {}
            StrategySpec::NodgHybrid { chunk_size, token_budget } => {
                if *chunk_size == 0 || *chunk_size > *token_budget {
                    return fail(format!(
                        "nodg-hybrid: need 1 <= chunk_size ({chunk_size}) <= token_budget ({token_budget})"
                    ));
                }
            }
            StrategySpec::Fudg { prefill_instances, link_bandwidth, hops, transfer_latency } => {
                if *prefill_instances == 0 || *prefill_instances >= self.cluster.instances {
                    return fail(format!(
                        "fudg: prefill_instances {prefill_instances} leaves no decode instances (cluster has {})",
                        self.cluster.instances
                    ));
                }
                if *link_bandwidth <= 0.0 || !(*hops == 1 || *hops == 2) || *transfer_latency < 0.0 {
                    return fail("fudg: invalid link parameters".into());
                }
            }
        }
        if let Some(scaling) = &self.scaling {
            if !matches!(self.strategy, StrategySpec::Padg { .. }) {
                return fail("scaling requires the padg strategy".into());
            }
            scaling.policy.validate().map_err(ScenarioError::Config)?;
            if scaling.max_instances < self.cluster.instances {
                return fail("scaling.max_instances below the initial instance count".into());
            }
            if scaling.sample_period <= 0.0 {
                return fail("scaling.sample_period must be > 0".into());
            }
        }
        Ok(())
    }

    /// The per-instance configuration all instances share.
    pub fn instance_config(&self) -> Result<SimInstanceConfig, ScenarioError> {
        let pair = &self.cluster.profile;
        let total_mem = self.cluster.tp_degree * pair.device.mem_capacity;
        let headroom = total_mem.saturating_sub(pair.model.weights_bytes);
        let kv_capacity = self.cluster.kv_capacity_bytes.unwrap_or(headroom);
        Ok(SimInstanceConfig {
            model: pair.model.clone(),
            device: pair.device.clone(),
            device_count: self.cluster.tp_degree,
            tp_degree: self.cluster.tp_degree,
            comm_overhead_fraction: self.cluster.comm_overhead_fraction,
            kv_capacity_bytes: kv_capacity,
            switch_overhead: self.cluster.switch_overhead,
            per_layer_overhead: self.cluster.per_layer_overhead,
        })
    }

    /// Materialize the request trace (the scenario seed governs generation).
    pub fn requests(&self) -> Result<Vec<Request>, ScenarioError> {
        match &self.workload {
            WorkloadSource::Synthetic(spec) => {
                let mut spec = spec.clone();
                spec.seed = self.seed;
                Ok(generate(&spec)?)
            }
            WorkloadSource::Trace(requests) => Ok(requests.clone()),
        }
    }

    /// Mean output length of the workload, the default admission reservation.
    pub fn mean_output_tokens(&self) -> u64 {
        match &self.workload {
            WorkloadSource::Synthetic(spec) => spec.output_len.clamped_mean().round() as u64,
            WorkloadSource::Trace(requests) => {
                if requests.is_empty() {
                    0
                } else {
                    let sum: u64 = requests.iter().map(|r| r.output_len).sum();
                    sum / requests.len() as u64
                }
            }
        }
    }

    /// Replace a constant-rate synthetic workload's rate (goodput probes).
    pub fn with_rate(&self, rate: f64, seed: u64) -> Result<Scenario, ScenarioError> {
        let WorkloadSource::Synthetic(spec) = &self.workload else {
            return Err(ScenarioError::Config(
                "rate sweeps require a synthetic workload".into(),
            ));
        };
        let mut out = self.clone();
        let mut spec = spec.clone();
        spec.rate = crate::workload::RatePlan::Constant(rate);
        out.workload = WorkloadSource::Synthetic(spec);
        out.seed = seed;
        Ok(out)
    }

    fn build_strategy(&self, cfg: &SimInstanceConfig) -> Result<Box<dyn Strategy>, ScenarioError> {
        let all: Vec<InstanceId> = (0..self.cluster.instances)
            .map(|i| InstanceId(i as u32))
            .collect();
        Ok(match &self.strategy {
            StrategySpec::Padg { status_period, staleness_factor, reservation_tokens } => {
                let layout: Vec<Vec<InstanceId>> = match &self.cluster.macros {
                    Some(groups) => groups
                        .iter()
                        .map(|g| g.iter().map(|&i| InstanceId(i as u32)).collect())
                        .collect(),
                    None => vec![all],
                };
                let padg_cfg = PadgConfig {
                    slo: self.slo,
                    status_period: *status_period,
                    staleness_factor: *staleness_factor,
                    reservation_tokens: reservation_tokens.unwrap_or_else(|| self.mean_output_tokens()),
                };
                let scaling = self.scaling.as_ref().map(|s| {
                    MitosisController::new(
                        s.policy.clone(),
                        self.slo,
                        cfg.clone(),
                        s.max_instances,
                        s.sample_period,
                        TriggerSource::Policy,
                    )
                });
                Box::new(PadgScheduler::new(padg_cfg, layout, scaling))
            }
            StrategySpec::NodgSeparate => Box::new(NodgSeparate::new(all)),
            StrategySpec::NodgHybrid { chunk_size, token_budget } => {
                Box::new(NodgHybrid::new(all, *chunk_size, *token_budget))
            }
            StrategySpec::Fudg { prefill_instances, link_bandwidth, hops, transfer_latency } => {
                let (prefill, decode) = all.split_at(*prefill_instances);
                Box::new(FudgScheduler::new(FudgTopology {
                    prefill_instances: prefill.to_vec(),
                    decode_instances: decode.to_vec(),
                    link_bandwidth: *link_bandwidth,
                    hops: *hops,
                    transfer_latency: *transfer_latency,
                    reservation_tokens: self.mean_output_tokens(),
                }))
            }
        })
    }

    /// Build the ready-to-run simulation (tests sometimes want the pieces).
    pub fn build(&self) -> Result<Simulation, ScenarioError> {
        self.validate()?;
        let cfg = self.instance_config()?;
        let requests = self.requests()?;
        let strategy = self.build_strategy(&cfg)?;
        Ok(Simulation::new(
            vec![cfg; self.cluster.instances],
            &requests,
            strategy,
            self.horizon,
            self.cluster.max_prefill_batch_tokens,
            self.audit,
        ))
    }
}

/// Validate and run a scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<SimulationResult, ScenarioError> {
    Ok(scenario.build()?.run()?)
}
