//! Non-disaggregated baselines: independent instances with least-loaded
//! routing, in the two batching flavors.

use crate::engine::{Action, SimState, Strategy};
use crate::request::{InstanceId, RequestId};

/// Separate batching with prefill-priority scheduling: any pending prefill
/// preempts the next decode iteration, and decode batches carry every active
/// request.
pub struct NodgSeparate {
    instances: Vec<InstanceId>,
}

impl NodgSeparate {
    pub fn new(instances: Vec<InstanceId>) -> Self {
        Self { instances }
    }
}

impl Strategy for NodgSeparate {
    fn name(&self) -> &'static str {
        "nodg-separate"
    }

    fn init(&mut self, _state: &mut SimState) {}

    fn on_arrival(&mut self, state: &mut SimState, req: RequestId) {
        if let Some(inst) = super::least_outstanding(state, &self.instances) {
            state.enqueue_prefill(inst, req);
        }
    }

    fn next_action(&mut self, state: &SimState, inst: InstanceId) -> Action {
        super::prefill_priority_action(state, inst)
    }
}

/// Hybrid batching with decode priority and chunked prefill: every iteration
/// carries all active decodes plus prefill chunks up to the token budget.
pub struct NodgHybrid {
    instances: Vec<InstanceId>,
    chunk_size: u64,
    token_budget: u64,
}

impl NodgHybrid {
    /// Panics if `chunk_size` exceeds `token_budget`.
    pub fn new(instances: Vec<InstanceId>, chunk_size: u64, token_budget: u64) -> Self {
        assert!(chunk_size >= 1 && token_budget >= 1);
        assert!(
            chunk_size <= token_budget,
            "chunk_size {chunk_size} must not exceed token_budget {token_budget}"
        );
        Self { instances, chunk_size, token_budget }
    }
}

impl Strategy for NodgHybrid {
    fn name(&self) -> &'static str {
        "nodg-hybrid"
    }

    fn init(&mut self, _state: &mut SimState) {}

    fn on_arrival(&mut self, state: &mut SimState, req: RequestId) {
        if let Some(inst) = super::least_outstanding(state, &self.instances) {
            state.enqueue_prefill(inst, req);
        }
    }

    fn next_action(&mut self, state: &SimState, inst: InstanceId) -> Action {
        let instance = state.instance(inst);
        if instance.has_prefill_work() || instance.has_decode_work() {
            Action::HybridStep { chunk_size: self.chunk_size, token_budget: self.token_budget }
        } else {
            Action::Idle
        }
    }
}
