//! Fully disaggregated serving: dedicated prefill and decode instances with
//! KV caches transferred over a shared link.
//!
//! Transfers in flight share the link bandwidth equally; shares are settled
//! and the earliest completion rescheduled whenever a transfer starts or
//! finishes. A transfer moves `hops * payload` wire bytes (two hops when KV
//! passes through a centralized pool) and completes `hops * latency` after
//! its wire bytes drain. A request's KV occupies its prefill instance until
//! the transfer is delivered, which backpressures prefill admission when the
//! link saturates.

use crate::engine::{Action, SimState, Strategy};
use crate::event::{EventKind, TransferStage};
use crate::request::{InstanceId, RequestId};

/// Prefill/decode split and link parameters.
#[derive(Debug, Clone)]
pub struct FudgTopology {
    pub prefill_instances: Vec<InstanceId>,
    pub decode_instances: Vec<InstanceId>,
    /// Shared KV-transfer link, bytes/s.
    pub link_bandwidth: f64,
    /// 1 = direct transfer, 2 = via a centralized pool.
    pub hops: u8,
    /// Fixed per-hop transfer latency, seconds.
    pub transfer_latency: f64,
    /// Output-KV reservation (tokens) required to land on a decode instance.
    pub reservation_tokens: u64,
}

impl FudgTopology {
    pub fn validate(&self) -> Result<(), String> {
        if self.prefill_instances.is_empty() || self.decode_instances.is_empty() {
            return Err("both prefill and decode instance sets must be nonempty".into());
        }
        if self.link_bandwidth <= 0.0 {
            return Err("link_bandwidth must be > 0".into());
        }
        if !(self.hops == 1 || self.hops == 2) {
            return Err("hops must be 1 (direct) or 2 (via pool)".into());
        }
        if self.transfer_latency < 0.0 {
            return Err("transfer_latency must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ActiveTransfer {
    req: RequestId,
    wire_remaining: f64,
}

/// Fair-share link: active transfers progress at `bandwidth / n`.
#[derive(Debug)]
struct FairShareLink {
    bandwidth: f64,
    era: u64,
    last_settle: f64,
    active: Vec<ActiveTransfer>,
}

impl FairShareLink {
    fn settle(&mut self, now: f64) {
        if !self.active.is_empty() {
            let rate = self.bandwidth / self.active.len() as f64;
            let elapsed = now - self.last_settle;
            for t in &mut self.active {
                t.wire_remaining = (t.wire_remaining - rate * elapsed).max(0.0);
            }
        }
        self.last_settle = now;
    }

    /// Schedule the next drain completion; stale events are filtered by era.
    fn reschedule(&mut self, state: &mut SimState) {
        self.era += 1;
        if self.active.is_empty() {
            return;
        }
        let rate = self.bandwidth / self.active.len() as f64;
        let (next, _) = self
            .active
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.wire_remaining.partial_cmp(&b.wire_remaining).unwrap())
            .map(|(i, t)| (i, t.wire_remaining))
            .unwrap();
        let t = &self.active[next];
        state.schedule(
            state.now + t.wire_remaining / rate,
            EventKind::KvTransferDone { request: t.req, stage: TransferStage::Drained, era: self.era },
        );
    }
}

pub struct FudgScheduler {
    topology: FudgTopology,
    link: FairShareLink,
    /// Delivered transfers waiting for decode-side KV room (FIFO).
    landing: Vec<RequestId>,
}

impl FudgScheduler {
    pub fn new(topology: FudgTopology) -> Self {
        topology.validate().expect("valid topology");
        let bandwidth = topology.link_bandwidth;
        Self {
            topology,
            link: FairShareLink { bandwidth, era: 0, last_settle: 0.0, active: Vec::new() },
            landing: Vec::new(),
        }
    }

    fn payload_bytes(&self, state: &SimState, req: RequestId) -> u64 {
        let record = state.record(req);
        let inst = record.kv_residence.expect("KV resident during transfer");
        record.input_len * state.instance(inst).cfg.model.kv_bytes_per_token()
    }

    /// Land delivered transfers on the least-KV-loaded decode instance that
    /// has room; strict FIFO, so a large head waits rather than being passed.
    fn try_land(&mut self, state: &mut SimState) {
        while let Some(&req) = self.landing.first() {
            let record = state.record(req);
            let target = self
                .topology
                .decode_instances
                .iter()
                .copied()
                .filter(|&i| !state.instance(i).draining)
                .filter(|&i| {
                    let kvpt = state.instance(i).cfg.model.kv_bytes_per_token();
                    let need = (record.kv_tokens() + self.topology.reservation_tokens) * kvpt;
                    state.kv_headroom(i) >= need
                })
                .min_by_key(|&i| (state.instance(i).kv_used, i));
            match target {
                Some(inst) => {
                    self.landing.remove(0);
                    state
                        .admit_for_decode(inst, req)
                        .expect("headroom checked before landing");
                }
                None => break,
            }
        }
    }
}

impl Strategy for FudgScheduler {
    fn name(&self) -> &'static str {
        "fudg"
    }

    fn init(&mut self, _state: &mut SimState) {}

    fn on_arrival(&mut self, state: &mut SimState, req: RequestId) {
        if let Some(inst) = super::least_outstanding(state, &self.topology.prefill_instances) {
            state.enqueue_prefill(inst, req);
        }
    }

    fn next_action(&mut self, state: &SimState, inst: InstanceId) -> Action {
        let is_prefill = self.topology.prefill_instances.contains(&inst);
        let instance = state.instance(inst);
        if is_prefill {
            if instance.has_prefill_work() {
                Action::StartPrefill
            } else {
                Action::Idle
            }
        } else if instance.has_decode_work() {
            Action::DecodeStep
        } else {
            Action::Idle
        }
    }

    fn on_prefill_completed(&mut self, state: &mut SimState, inst: InstanceId, reqs: &[RequestId]) {
        let now = state.now;
        self.link.settle(now);
        for &req in reqs {
            // The first token is out; the KV stays on the prefill instance
            // until the transfer is delivered.
            state.take_prefilled(inst, req);
            let wire = self.topology.hops as f64 * self.payload_bytes(state, req) as f64;
            self.link.active.push(ActiveTransfer { req, wire_remaining: wire });
        }
        self.link.reschedule(state);
    }

    fn on_transfer_event(&mut self, state: &mut SimState, req: RequestId, stage: TransferStage, era: u64) {
        match stage {
            TransferStage::Drained => {
                if era != self.link.era {
                    return; // superseded by a later link change
                }
                self.link.settle(state.now);
                // Sub-byte residues are settling noise; the event's own
                // transfer is done by construction.
                let mut finished = Vec::new();
                self.link.active.retain(|t| {
                    if t.req == req || t.wire_remaining <= 1.0 {
                        finished.push(t.req);
                        false
                    } else {
                        true
                    }
                });
                debug_assert!(finished.contains(&req));
                let tail = self.topology.hops as f64 * self.topology.transfer_latency;
                for r in finished {
                    state.schedule(
                        state.now + tail,
                        EventKind::KvTransferDone { request: r, stage: TransferStage::Delivered, era: 0 },
                    );
                }
                self.link.reschedule(state);
            }
            TransferStage::Delivered => {
                state.transfer_payload_bytes += self.payload_bytes(state, req);
                state.free_request_kv(req);
                self.landing.push(req);
                self.try_land(state);
            }
        }
    }

    fn on_request_completed(&mut self, state: &mut SimState, _req: RequestId) {
        // Decode-side KV freed: parked transfers may land now.
        self.try_land(state);
    }
}
