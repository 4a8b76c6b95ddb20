//! Serving strategies: PaDG (temporal disaggregation with rolling activation),
//! NoDG baselines (separate and hybrid batching), and FuDG (fully
//! disaggregated prefill/decode instances with KV transfers).

pub mod fudg;
pub mod nodg;
pub mod padg;

use crate::engine::{Action, SimState};
use crate::request::InstanceId;

/// Prefill-priority intra-instance policy: pending prefills preempt the next
/// decode iteration; decodes continue otherwise.
pub(crate) fn prefill_priority_action(state: &SimState, inst: InstanceId) -> Action {
    let instance = state.instance(inst);
    if instance.has_prefill_work() {
        Action::StartPrefill
    } else if instance.has_decode_work() {
        Action::DecodeStep
    } else {
        Action::Idle
    }
}

/// Least-outstanding-tokens routing over a set of instances; ties break on
/// the lowest instance id.
pub(crate) fn least_outstanding(state: &SimState, candidates: &[InstanceId]) -> Option<InstanceId> {
    candidates
        .iter()
        .copied()
        .filter(|&i| !state.instance(i).draining)
        .min_by_key(|&i| (state.outstanding_tokens(i), i))
}
