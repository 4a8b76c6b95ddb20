//! Partially disaggregated scheduling: macro-instance routing with cyclic
//! probing, three-constraint admission, and the prefill-priority intra policy
//! whose interaction produces temporal disaggregation and rolling activation.
//!
//! Admission control is what creates the long single-phase periods: the
//! macro-instance scheduler keeps routing consecutive requests to the same
//! instance until one of the constraints fails, then advances to the next
//! one. Instances that receive no prefills decode undisturbed, accumulating
//! TPOT slack that later pays for their next prefill window.

use crate::cost::prefill_time;
use crate::engine::{Action, InstancePhase, ProbeOutcome, RouteProbe, SimState, Strategy};
use crate::event::{EventKind, StatusTrigger};
use crate::request::{InstanceId, RequestId, RequestInfo};
use crate::scaling::MitosisController;
use crate::workload::SloConfig;
use std::collections::VecDeque;
use thiserror::Error;

/// Scheduler knobs with the defaults used throughout.
#[derive(Debug, Clone)]
pub struct PadgConfig {
    pub slo: SloConfig,
    /// Period of instance status updates, simulated seconds.
    pub status_period: f64,
    /// Snapshots older than `staleness_factor * status_period` are rejected.
    pub staleness_factor: f64,
    /// KV reservation for future output tokens, added to a request's input
    /// KV when checking Constraint 3.
    pub reservation_tokens: u64,
}

impl PadgConfig {
    pub fn staleness_bound(&self) -> f64 {
        self.staleness_factor * self.status_period
    }
}

/// The coordination unit: an ordered group of instances sharing one router.
#[derive(Debug, Clone)]
pub struct MacroInstance {
    pub id: u32,
    pub instances: Vec<InstanceId>,
    /// Index of the instance that received the last routed request.
    pub prev_idx: usize,
    /// Requests deferred by admission, retried FIFO on status updates.
    pub macro_queue: VecDeque<RequestId>,
}

impl MacroInstance {
    pub fn new(id: u32, instances: Vec<InstanceId>) -> Self {
        Self { id, instances, prev_idx: 0, macro_queue: VecDeque::new() }
    }
}

/// Point-in-time view of one instance as seen by the macro scheduler.
#[derive(Debug, Clone)]
pub struct InstanceStatus {
    pub instance: InstanceId,
    pub snapshot_time: f64,
    pub phase: InstancePhase,
    pub t_switch: f64,
    /// All requests resident on the instance (pending, prefilled, decoding).
    pub requests: Vec<StatusEntry>,
    /// KV bytes in use, inclusive of the scheduler's own outstanding
    /// admission reservations.
    pub kv_used: u64,
    pub kv_capacity: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct StatusEntry {
    pub id: RequestId,
    pub arrival_time: f64,
    pub input_len: u64,
    pub first_token_time: Option<f64>,
    pub tokens_generated: u64,
}

/// Admission verdict for one (instance, request) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintOutcome {
    Satisfied,
    NotSatisfied(ConstraintKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Ttft,
    Tpot,
    KvCapacity,
}

#[derive(Debug, Error, PartialEq)]
#[error("status snapshot is stale: age {age}s exceeds bound {bound}s")]
pub struct StaleStatus {
    pub age: f64,
    pub bound: f64,
}

/// Inputs to the constraint check besides the status itself.
pub struct CheckParams<'a> {
    pub slo: SloConfig,
    pub staleness_bound: f64,
    /// Predicted prefill duration for a prompt of the given length.
    pub predictor: &'a dyn Fn(u64) -> f64,
    /// KV estimate for the candidate request (input plus output reservation).
    pub kv_estimate: u64,
}

/// The three-constraint admission check.
///
/// Constraint 1 (TTFT): the summed predicted prefill durations of every
/// request arrived since the instance's last phase switch, plus the
/// candidate, must not exceed the TTFT SLO.
///
/// Constraint 2 (TPOT): requests decoding since before the switch must hold
/// enough mean saved TPOT — `tokens_generated * slo_tpot - (now -
/// first_token_time)` — to absorb that prefill interruption; vacuously
/// satisfied with no such decodes.
///
/// Constraint 3 (KV): the candidate's KV estimate must fit the remaining
/// capacity.
pub fn check_constraints(
    status: &InstanceStatus,
    req: &RequestInfo,
    params: &CheckParams<'_>,
    now: f64,
) -> Result<ConstraintOutcome, StaleStatus> {
    let age = now - status.snapshot_time;
    if age > params.staleness_bound {
        return Err(StaleStatus { age, bound: params.staleness_bound });
    }

    // Constraint 1: TTFT.
    let pending: Vec<u64> = status
        .requests
        .iter()
        .filter(|r| r.arrival_time >= status.t_switch)
        .map(|r| r.input_len)
        .chain(std::iter::once(req.input_len))
        .collect();
    let t_total: f64 = pending.iter().map(|&len| (params.predictor)(len)).sum();
    if t_total > params.slo.slo_ttft {
        return Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::Ttft));
    }

    // Constraint 2: TPOT.
    let saved: Vec<f64> = status
        .requests
        .iter()
        .filter(|r| r.arrival_time < status.t_switch)
        .filter_map(|r| {
            r.first_token_time.map(|ft| {
                r.tokens_generated as f64 * params.slo.slo_tpot - (now - ft)
            })
        })
        .collect();
    if !saved.is_empty() {
        let mean_saved = saved.iter().sum::<f64>() / saved.len() as f64;
        if mean_saved < t_total {
            return Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::Tpot));
        }
    }

    // Constraint 3: KV cache capacity.
    if params.kv_estimate > status.kv_capacity.saturating_sub(status.kv_used) {
        return Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::KvCapacity));
    }
    Ok(ConstraintOutcome::Satisfied)
}

/// Outstanding admission reservation the scheduler tracks per routed request.
#[derive(Debug, Clone, Copy)]
struct Reservation {
    req: RequestId,
    reserved_tokens: u64,
}

#[derive(Debug, Default)]
struct InstanceLedger {
    /// Requests routed since the last snapshot (not yet visible in it).
    routed_since: Vec<RequestId>,
    reservations: Vec<Reservation>,
}

/// Routing outcome of one inter-schedule pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteOutcome {
    Routed(InstanceId),
    Deferred,
}

pub struct PadgScheduler {
    cfg: PadgConfig,
    pub macros: Vec<MacroInstance>,
    next_macro_id: u32,
    /// Overall-scheduler dispatch pointer (round-robin across macros).
    rr_cursor: usize,
    statuses: Vec<Option<InstanceStatus>>,
    ledgers: Vec<InstanceLedger>,
    pub scaling: Option<MitosisController>,
}

impl PadgScheduler {
    pub fn new(cfg: PadgConfig, layout: Vec<Vec<InstanceId>>, scaling: Option<MitosisController>) -> Self {
        let macros = layout
            .into_iter()
            .enumerate()
            .map(|(i, instances)| MacroInstance::new(i as u32, instances))
            .collect::<Vec<_>>();
        let next_macro_id = macros.len() as u32;
        Self {
            cfg,
            macros,
            next_macro_id,
            rr_cursor: 0,
            statuses: Vec::new(),
            ledgers: Vec::new(),
            scaling,
        }
    }

    pub fn config(&self) -> &PadgConfig {
        &self.cfg
    }

    pub fn fresh_macro_id(&mut self) -> u32 {
        let id = self.next_macro_id;
        self.next_macro_id += 1;
        id
    }

    fn ensure_slots(&mut self, state: &SimState) {
        while self.statuses.len() < state.instances.len() {
            self.statuses.push(None);
            self.ledgers.push(InstanceLedger::default());
        }
    }

    /// Snapshot one instance's status from live engine state.
    fn refresh_snapshot(&mut self, state: &SimState, inst: InstanceId) {
        self.ensure_slots(state);
        let instance = state.instance(inst);
        let mut requests = Vec::new();
        for req in instance
            .pending_prefills
            .iter()
            .chain(instance.prefilled_waiting.iter())
            .chain(instance.active_decodes.iter())
        {
            let record = state.record(*req);
            requests.push(StatusEntry {
                id: *req,
                arrival_time: record.arrival_time,
                input_len: record.input_len,
                first_token_time: record.prefill_end_time,
                tokens_generated: record.tokens_generated,
            });
        }
        self.statuses[inst.index()] = Some(InstanceStatus {
            instance: inst,
            snapshot_time: state.now,
            phase: instance.phase,
            t_switch: instance.t_switch,
            requests,
            kv_used: instance.kv_used,
            kv_capacity: instance.kv_capacity(),
        });
        let ledger = &mut self.ledgers[inst.index()];
        ledger.routed_since.clear();
        ledger
            .reservations
            .retain(|r| !state.record(r.req).finished());
    }

    fn refresh_all(&mut self, state: &SimState) {
        for idx in 0..state.instances.len() {
            self.refresh_snapshot(state, InstanceId(idx as u32));
        }
    }

    /// Snapshot augmented with the scheduler's own post-snapshot admissions
    /// and outstanding KV reservations.
    fn effective_status(&self, state: &SimState, inst: InstanceId) -> InstanceStatus {
        let mut status = self.statuses[inst.index()]
            .clone()
            .expect("status snapshot exists for every instance");
        let ledger = &self.ledgers[inst.index()];
        for &req in &ledger.routed_since {
            let record = state.record(req);
            status.requests.push(StatusEntry {
                id: req,
                arrival_time: record.arrival_time,
                input_len: record.input_len,
                first_token_time: None,
                tokens_generated: 0,
            });
        }
        let kvpt = state.instance(inst).cfg.model.kv_bytes_per_token();
        let outstanding: u64 = ledger
            .reservations
            .iter()
            .map(|r| {
                let record = state.record(r.req);
                if record.finished() {
                    0
                } else if record.prefill_end_time.is_none() {
                    (record.input_len + r.reserved_tokens) * kvpt
                } else {
                    r.reserved_tokens.saturating_sub(record.tokens_generated) * kvpt
                }
            })
            .sum();
        status.kv_used += outstanding;
        status
    }

    /// Register a freshly provisioned instance (scaling) with the status map.
    pub(crate) fn note_new_instance(&mut self, state: &SimState, inst: InstanceId) {
        self.ensure_slots(state);
        self.refresh_snapshot(state, inst);
    }

    fn routable(&self, state: &SimState, inst: InstanceId) -> bool {
        let instance = state.instance(inst);
        !instance.draining && state.now >= instance.routable_after
    }

    /// Algorithm: try the instance that took the previous request first, then
    /// probe cyclically for at most one full cycle; `prev_idx` moves only
    /// when a constraint fails.
    pub fn inter_schedule(
        &mut self,
        state: &mut SimState,
        macro_idx: usize,
        req: RequestId,
    ) -> RouteOutcome {
        self.ensure_slots(state);
        let info = state.request_info(req);
        let now = state.now;
        let n = self.macros[macro_idx].instances.len();
        let prev = if n == 0 { 0 } else { self.macros[macro_idx].prev_idx % n };
        for k in 0..n {
            let idx = (prev + k) % n;
            let inst = self.macros[macro_idx].instances[idx];
            let macro_id = self.macros[macro_idx].id;
            if !self.routable(state, inst) {
                state.routing_log.push(RouteProbe {
                    time: now,
                    request: req,
                    macro_id,
                    instance: inst,
                    outcome: ProbeOutcome::Unroutable,
                    routed: false,
                });
                continue;
            }
            let status = self.effective_status(state, inst);
            let cfg = &state.instance(inst).cfg;
            let predictor = |tokens: u64| prefill_time(cfg, tokens);
            let params = CheckParams {
                slo: self.cfg.slo,
                staleness_bound: self.cfg.staleness_bound(),
                predictor: &predictor,
                kv_estimate: (info.input_len + self.cfg.reservation_tokens)
                    * cfg.model.kv_bytes_per_token(),
            };
            let outcome = check_constraints(&status, &info, &params, now);
            let probe_outcome = match outcome {
                Err(_) => ProbeOutcome::StaleStatus,
                Ok(ConstraintOutcome::Satisfied) => ProbeOutcome::Satisfied,
                Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::Ttft)) => ProbeOutcome::TtftExceeded,
                Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::Tpot)) => ProbeOutcome::TpotExceeded,
                Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::KvCapacity)) => ProbeOutcome::KvExceeded,
            };
            let routed = probe_outcome == ProbeOutcome::Satisfied;
            state.routing_log.push(RouteProbe {
                time: now,
                request: req,
                macro_id,
                instance: inst,
                outcome: probe_outcome,
                routed,
            });
            if routed {
                self.macros[macro_idx].prev_idx = idx;
                self.admit(state, inst, req);
                return RouteOutcome::Routed(inst);
            }
        }
        RouteOutcome::Deferred
    }

    fn admit(&mut self, state: &mut SimState, inst: InstanceId, req: RequestId) {
        state.enqueue_prefill(inst, req);
        let ledger = &mut self.ledgers[inst.index()];
        ledger.routed_since.push(req);
        ledger.reservations.push(Reservation {
            req,
            reserved_tokens: self.cfg.reservation_tokens,
        });
    }

    /// FIFO retry of deferred requests; head-of-line blocking is intentional.
    fn retry_deferred(&mut self, state: &mut SimState) {
        for m in 0..self.macros.len() {
            while let Some(&req) = self.macros[m].macro_queue.front() {
                match self.inter_schedule(state, m, req) {
                    RouteOutcome::Routed(_) => {
                        self.macros[m].macro_queue.pop_front();
                    }
                    RouteOutcome::Deferred => break,
                }
            }
        }
    }

    fn schedule_next_status(&self, state: &mut SimState) {
        if state.work_remaining() {
            state.schedule_in(self.cfg.status_period, EventKind::StatusUpdate(StatusTrigger::Periodic));
        }
    }
}

impl Strategy for PadgScheduler {
    fn name(&self) -> &'static str {
        "padg"
    }

    fn init(&mut self, state: &mut SimState) {
        self.ensure_slots(state);
        self.refresh_all(state);
        self.schedule_next_status(state);
        if let Some(scaling) = &self.scaling {
            state.schedule_in(scaling.sample_period, EventKind::ScaleCheck);
        }
    }

    fn on_arrival(&mut self, state: &mut SimState, req: RequestId) {
        if self.macros.is_empty() {
            return;
        }
        let m = self.rr_cursor % self.macros.len();
        self.rr_cursor = self.rr_cursor.wrapping_add(1);
        match self.inter_schedule(state, m, req) {
            RouteOutcome::Routed(_) => {}
            RouteOutcome::Deferred => {
                state.records[req.index()].was_deferred = true;
                self.macros[m].macro_queue.push_back(req);
            }
        }
    }

    fn next_action(&mut self, state: &SimState, inst: InstanceId) -> Action {
        super::prefill_priority_action(state, inst)
    }

    fn on_status_update(&mut self, state: &mut SimState, trigger: StatusTrigger) {
        match trigger {
            StatusTrigger::Periodic => {
                self.refresh_all(state);
                self.retry_deferred(state);
                self.schedule_next_status(state);
            }
            StatusTrigger::PhaseChange(inst) => {
                self.ensure_slots(state);
                self.refresh_snapshot(state, inst);
                self.retry_deferred(state);
            }
        }
    }

    fn on_scale_check(&mut self, state: &mut SimState) {
        if self.scaling.is_none() {
            return;
        }
        crate::scaling::run_scale_check(self, state);
        if let Some(scaling) = &self.scaling {
            if state.work_remaining() {
                state.schedule_in(scaling.sample_period, EventKind::ScaleCheck);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn status(t_switch: f64, entries: Vec<StatusEntry>, kv_used: u64, kv_cap: u64) -> InstanceStatus {
        InstanceStatus {
            instance: InstanceId(0),
            snapshot_time: 10.0,
            phase: InstancePhase::Decode,
            t_switch,
            requests: entries,
            kv_used,
            kv_capacity: kv_cap,
        }
    }

    fn entry(id: u32, arrival: f64, input: u64, ft: Option<f64>, gen: u64) -> StatusEntry {
        StatusEntry {
            id: RequestId(id),
            arrival_time: arrival,
            input_len: input,
            first_token_time: ft,
            tokens_generated: gen,
        }
    }

    fn req(input: u64) -> RequestInfo {
        RequestInfo { id: RequestId(99), arrival_time: 10.0, input_len: input }
    }

    fn params<'a>(
        slo: SloConfig,
        predictor: &'a dyn Fn(u64) -> f64,
        kv_estimate: u64,
    ) -> CheckParams<'a> {
        CheckParams { slo, staleness_bound: 0.2, predictor, kv_estimate }
    }

    const SLO: SloConfig = SloConfig { slo_ttft: 5.0, slo_tpot: 0.1 };

    #[test]
    fn idle_instance_satisfies_all_constraints() {
        let st = status(0.0, vec![], 0, 1 << 30);
        let pred = |_t: u64| 0.2;
        let out = check_constraints(&st, &req(100), &params(SLO, &pred, 1 << 20), 10.0).unwrap();
        assert_eq!(out, ConstraintOutcome::Satisfied);
    }

    #[test]
    fn ttft_constraint_fails_when_pending_sum_exceeds_slo() {
        // Pending prefills predicted at 4.9s; adding 0.2s crosses the 5s SLO.
        let st = status(
            5.0,
            vec![entry(1, 6.0, 4900, None, 0)],
            0,
            1 << 30,
        );
        let pred = |t: u64| t as f64 / 1000.0;
        let out = check_constraints(&st, &req(200), &params(SLO, &pred, 1), 10.0).unwrap();
        assert_eq!(out, ConstraintOutcome::NotSatisfied(ConstraintKind::Ttft));
    }

    #[test]
    fn saved_tpot_covers_interruption() {
        // One decode: 100 tokens at 0.1s SLO, first token 8s ago:
        // saved = 10 - 8 = 2s >= t_total 1.5s.
        let st = status(
            9.0,
            vec![
                entry(1, 0.5, 100, Some(2.0), 100),
                entry(2, 9.5, 1300, None, 0),
            ],
            0,
            1 << 30,
        );
        let pred = |t: u64| t as f64 / 1000.0;
        let out = check_constraints(&st, &req(200), &params(SLO, &pred, 1), 10.0).unwrap();
        assert_eq!(out, ConstraintOutcome::Satisfied);

        // Shrink the saved slack below t_total: fails Constraint 2.
        let st = status(
            9.0,
            vec![
                entry(1, 0.5, 100, Some(9.0), 10),
                entry(2, 9.5, 1300, None, 0),
            ],
            0,
            1 << 30,
        );
        let out = check_constraints(&st, &req(200), &params(SLO, &pred, 1), 10.0).unwrap();
        assert_eq!(out, ConstraintOutcome::NotSatisfied(ConstraintKind::Tpot));
    }

    #[test]
    fn kv_constraint_fails_without_headroom() {
        let st = status(0.0, vec![], 900, 1000);
        let pred = |_t: u64| 0.0;
        let out = check_constraints(&st, &req(10), &params(SLO, &pred, 200), 10.0).unwrap();
        assert_eq!(out, ConstraintOutcome::NotSatisfied(ConstraintKind::KvCapacity));
    }

    #[test]
    fn stale_snapshot_is_an_error() {
        let mut st = status(0.0, vec![], 0, 1000);
        st.snapshot_time = 1.0;
        let pred = |_t: u64| 0.0;
        let err = check_constraints(&st, &req(10), &params(SLO, &pred, 1), 10.0).unwrap_err();
        assert!(err.age > err.bound);
    }

    #[test]
    fn check_is_pure() {
        let st = status(5.0, vec![entry(1, 6.0, 100, None, 0)], 10, 1000);
        let pred = |t: u64| t as f64 / 500.0;
        let a = check_constraints(&st, &req(50), &params(SLO, &pred, 5), 10.0).unwrap();
        let b = check_constraints(&st, &req(50), &params(SLO, &pred, 5), 10.0).unwrap();
        assert_eq!(a, b);
    }
}
