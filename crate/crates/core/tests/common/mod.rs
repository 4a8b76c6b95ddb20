//! Shared builders for integration tests: a small fast model and scenario
//! shorthand around hand-written traces.

#![allow(dead_code)]

use servesim_core::cost::{DeviceProfile, ModelProfile};
use servesim_core::profiles::PairProfile;
use servesim_core::request::Request;
use servesim_core::scenario::{ClusterSpec, Scenario, StrategySpec, WorkloadSource};
use servesim_core::workload::SloConfig;
use servesim_core::SimInstanceConfig;

pub fn toy_model() -> ModelProfile {
    ModelProfile {
        name: "toy-1b".into(),
        layer_num: 4,
        hidden_size: 1024,
        heads: 8,
        size_per_head: 128,
        kv_groups: 1,
        bytes_per_element: 2,
        weights_bytes: 100_000_000,
    }
}

pub fn toy_device() -> DeviceProfile<f64> {
    DeviceProfile {
        name: "toy-gpu".into(),
        peak_flops: 1e13,
        mem_bandwidth: 1e12,
        mem_capacity: 8_000_000_000,
        compute_efficiency: 0.5,
        bandwidth_efficiency: 0.8,
    }
}

pub fn toy_pair() -> PairProfile {
    PairProfile { model: toy_model(), device: toy_device() }
}

pub fn toy_instance_config() -> SimInstanceConfig {
    SimInstanceConfig {
        model: toy_model(),
        device: toy_device(),
        device_count: 1,
        tp_degree: 1,
        comm_overhead_fraction: 0.0,
        kv_capacity_bytes: 7_900_000_000,
        switch_overhead: 0.0,
        per_layer_overhead: 0.0,
    }
}

pub const TOY_SLO: SloConfig = SloConfig { slo_ttft: 5.0, slo_tpot: 0.1 };

pub fn req(arrival: f64, input: u64, output: u64) -> Request {
    Request { arrival_time: arrival, input_len: input, output_len: output, app: None }
}

/// Scenario over a hand-written trace on `n` identical toy instances.
pub fn trace_scenario(n: usize, strategy: StrategySpec, trace: Vec<Request>) -> Scenario {
    Scenario {
        name: "test".into(),
        seed: 1,
        horizon: 10_000.0,
        slo: TOY_SLO,
        workload: WorkloadSource::Trace(trace),
        strategy,
        cluster: ClusterSpec {
            profile: toy_pair(),
            instances: n,
            tp_degree: 1,
            comm_overhead_fraction: 0.0,
            switch_overhead: 0.0,
            per_layer_overhead: 0.0,
            kv_capacity_bytes: Some(7_900_000_000),
            max_prefill_batch_tokens: 4096,
            macros: None,
        },
        scaling: None,
        audit: true,
    }
}

pub fn padg_spec() -> StrategySpec {
    StrategySpec::Padg { status_period: 0.05, staleness_factor: 4.0, reservation_tokens: Some(0) }
}
