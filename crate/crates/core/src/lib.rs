//! servesim-core — discrete-event simulator for multi-instance LLM serving clusters.
//!
//! The crate models a cluster of inference instances served under one of three
//! strategies: non-disaggregated (NoDG, separate or hybrid batching), fully
//! disaggregated (FuDG, prefill/decode instances with KV transfers over a
//! shared link), and partially disaggregated (PaDG, temporal disaggregation
//! with rolling activation across a macro instance). Execution times come from
//! an analytic roofline cost model instead of GPU kernels, so a ten-minute
//! cluster trace replays in well under a second.
//!
//! Layering:
//!
//! ```text
//! workload ──▶ engine (events, instances, KV accounting) ──▶ metrics/report
//!                 │
//!           sched::{padg, nodg, fudg}   scaling (mitosis)
//!                 │
//!               cost (roofline model, calibrated profiles)
//! ```
//!
//! The cost model is generic over the scalar type via [`Scalar`]; the engine
//! itself runs on the concrete [`SimFloat`] aliases below.

pub mod cost;
pub mod engine;
pub mod event;
pub mod metrics;
pub mod profiles;
pub mod report;
pub mod request;
pub mod scaling;
pub mod scenario;
pub mod sched;
pub mod workload;

pub use cost::{
    arithmetic_intensity, decode_step_time, hybrid_step_time, op_cost, prefill_time,
    required_kv_bandwidth, BatchShape, ChunkWork, DeviceProfile, InstanceConfig, ModelProfile,
    OpCost, OpKind, Phase, Scalar,
};
pub use engine::{SimError, Simulation, SimulationResult};
pub use request::{Request, RequestId, RequestRecord};
pub use scenario::{run_scenario, Scenario};
pub use workload::{SloConfig, WorkloadSpec};

/// Concrete scalar type used by the simulation engine.
pub type SimFloat = f64;
/// Device profile instantiated at the engine's scalar type.
pub type SimDeviceProfile = DeviceProfile<SimFloat>;
/// Instance configuration instantiated at the engine's scalar type.
pub type SimInstanceConfig = InstanceConfig<SimFloat>;
