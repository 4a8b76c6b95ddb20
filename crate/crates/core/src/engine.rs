//! Deterministic discrete-event simulation kernel.
//!
//! The engine owns the virtual clock, the event queue, per-instance execution
//! state, and all KV accounting. Strategy objects (see [`crate::sched`]) make
//! every routing and phase decision; the engine only executes the mechanics:
//! it forms prefill batches FIFO under the token budget, runs decode/hybrid
//! iterations, charges and frees KV bytes, and stamps request lifecycle
//! timestamps.
//!
//! Determinism: one run is single-threaded; events are processed in
//! `(time, seq)` order with `seq` assigned at creation, every container with
//! iteration order is a `Vec` or `VecDeque`, and all randomness lives in the
//! workload generator. Identical `(scenario, seed)` pairs replay identically.

use crate::cost::{decode_step_time, hybrid_step_time, prefill_time, ChunkWork, Phase};
use crate::event::{EventKind, EventQueue, StatusTrigger, TransferStage};
use crate::request::{InstanceId, Request, RequestId, RequestInfo, RequestRecord};
use crate::SimInstanceConfig;
use std::collections::VecDeque;
use thiserror::Error;

/// Width of utilization-timeline buckets, seconds.
pub const UTILIZATION_BUCKET: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("kv capacity violated on instance {instance}: used {used} + {delta} > {capacity} (request {request}); scheduler admitted more than fits")]
    Capacity { instance: InstanceId, request: RequestId, used: u64, delta: u64, capacity: u64 },
    #[error("simulation invariant violated: {0}")]
    Invariant(String),
}

/// Phase of an instance, `Idle` when no work is in flight or queued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstancePhase {
    Prefill,
    Decode,
    Idle,
}

/// One entry of an in-flight prefill batch: `tokens` of `req`'s prompt, with
/// `finishes` set when this chunk completes the prompt.
#[derive(Debug, Clone)]
pub struct PrefillEntry {
    pub req: RequestId,
    pub tokens: u64,
    pub finishes: bool,
}

/// Work currently executing on an instance.
#[derive(Debug, Clone)]
pub enum Work {
    PrefillBatch { entries: Vec<PrefillEntry>, tokens: u64, since: f64 },
    DecodeStep { batch: Vec<RequestId>, since: f64 },
    HybridStep { batch: Vec<RequestId>, chunks: Vec<PrefillEntry>, since: f64 },
}

/// Action a strategy selects for a free instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Form a FIFO prefill batch up to the prefill token budget.
    StartPrefill,
    /// Run one decode iteration over all active requests.
    DecodeStep,
    /// Run one hybrid iteration: all active decodes plus prefill chunks.
    HybridStep { chunk_size: u64, token_budget: u64 },
    Idle,
}

/// One inference instance's execution state.
#[derive(Debug)]
pub struct Instance {
    pub cfg: SimInstanceConfig,
    pub phase: InstancePhase,
    /// Phase of the last executed work item; switch overhead is charged when
    /// new work differs from it.
    last_work: Option<Phase>,
    /// Timestamp of the last prefill<->decode transition.
    pub t_switch: f64,
    pub pending_prefills: VecDeque<RequestId>,
    /// Prefill finished inside the current window; enter `active_decodes`
    /// when the window ends.
    pub prefilled_waiting: Vec<RequestId>,
    pub active_decodes: Vec<RequestId>,
    pub kv_used: u64,
    pub in_flight: Option<Work>,
    pub busy_time: f64,
    /// Seconds busy per UTILIZATION_BUCKET-wide bucket.
    pub busy_buckets: Vec<f64>,
    pub draining: bool,
    /// Instance may not receive new routes before this time (migration).
    pub routable_after: f64,
    pub status_seq: u64,
    pub created_at: f64,
}

impl Instance {
    fn new(cfg: SimInstanceConfig, now: f64) -> Self {
        Self {
            cfg,
            phase: InstancePhase::Idle,
            last_work: None,
            t_switch: now,
            pending_prefills: VecDeque::new(),
            prefilled_waiting: Vec::new(),
            active_decodes: Vec::new(),
            kv_used: 0,
            in_flight: None,
            busy_time: 0.0,
            busy_buckets: Vec::new(),
            draining: false,
            routable_after: now,
            status_seq: 0,
            created_at: now,
        }
    }

    pub fn busy(&self) -> bool {
        self.in_flight.is_some()
    }

    /// Decode work exists: requests mid-decode or prefilled and waiting for
    /// the window to end.
    pub fn has_decode_work(&self) -> bool {
        !self.active_decodes.is_empty() || !self.prefilled_waiting.is_empty()
    }

    pub fn has_prefill_work(&self) -> bool {
        !self.pending_prefills.is_empty()
    }

    pub fn idle(&self) -> bool {
        !self.busy() && !self.has_prefill_work() && !self.has_decode_work()
    }

    pub fn kv_capacity(&self) -> u64 {
        self.cfg.kv_capacity_bytes
    }
}

/// A single constraint-probe row of the routing log.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteProbe {
    pub time: f64,
    pub request: RequestId,
    pub macro_id: u32,
    pub instance: InstanceId,
    pub outcome: ProbeOutcome,
    pub routed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeOutcome {
    Satisfied,
    TtftExceeded,
    TpotExceeded,
    KvExceeded,
    StaleStatus,
    Unroutable,
}

impl ProbeOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeOutcome::Satisfied => "satisfied",
            ProbeOutcome::TtftExceeded => "ttft",
            ProbeOutcome::TpotExceeded => "tpot",
            ProbeOutcome::KvExceeded => "kv",
            ProbeOutcome::StaleStatus => "stale",
            ProbeOutcome::Unroutable => "unroutable",
        }
    }
}

/// One applied scaling action with macro sizes before and after.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingLogEntry {
    pub time: f64,
    pub action: String,
    pub sizes_before: Vec<usize>,
    pub sizes_after: Vec<usize>,
}

/// Mutable simulation state shared between the engine loop and strategies.
pub struct SimState {
    pub now: f64,
    pub horizon: f64,
    queue: EventQueue,
    pub records: Vec<RequestRecord>,
    prefill_progress: Vec<u64>,
    pub instances: Vec<Instance>,
    pub prefill_batch_budget: u64,
    pub routing_log: Vec<RouteProbe>,
    pub scaling_log: Vec<ScalingLogEntry>,
    /// Aggregate KV payload bytes whose transfer completed (FuDG).
    pub transfer_payload_bytes: u64,
    completed: usize,
    pub events_processed: u64,
    /// Re-check all per-event invariants (KV conservation, clock order).
    pub audit: bool,
}

impl SimState {
    pub fn schedule(&mut self, time: f64, kind: EventKind) {
        self.queue.push(time, kind);
    }

    pub fn schedule_in(&mut self, delay: f64, kind: EventKind) {
        let time = self.now + delay;
        self.queue.push(time, kind);
    }

    pub fn request_info(&self, id: RequestId) -> RequestInfo {
        RequestInfo::of(&self.records[id.index()])
    }

    pub fn record(&self, id: RequestId) -> &RequestRecord {
        &self.records[id.index()]
    }

    pub fn instance(&self, id: InstanceId) -> &Instance {
        &self.instances[id.index()]
    }

    pub fn work_remaining(&self) -> bool {
        self.completed < self.records.len()
    }

    pub fn unfinished(&self) -> usize {
        self.records.len() - self.completed
    }

    /// Append a new instance to the cluster (scaling).
    pub fn add_instance(&mut self, cfg: SimInstanceConfig) -> InstanceId {
        let id = InstanceId(self.instances.len() as u32);
        self.instances.push(Instance::new(cfg, self.now));
        id
    }

    pub fn mark_draining(&mut self, id: InstanceId) {
        self.instances[id.index()].draining = true;
    }

    /// Enqueue a routed request for prefill on an instance.
    pub fn enqueue_prefill(&mut self, inst: InstanceId, req: RequestId) {
        debug_assert!(self.records[req.index()].routed_instance.is_none());
        self.records[req.index()].routed_instance = Some(inst);
        self.instances[inst.index()].pending_prefills.push_back(req);
    }

    /// Remove a prefilled request from an instance before it enters decoding
    /// (FuDG pulls requests out for transfer).
    pub fn take_prefilled(&mut self, inst: InstanceId, req: RequestId) {
        let waiting = &mut self.instances[inst.index()].prefilled_waiting;
        let pos = waiting.iter().position(|&r| r == req).expect("request not in prefilled_waiting");
        waiting.remove(pos);
    }

    /// Hand a request (with KV already freed elsewhere) to an instance's
    /// decode side, charging its KV there.
    pub fn admit_for_decode(&mut self, inst: InstanceId, req: RequestId) -> Result<(), SimError> {
        let bytes = self.records[req.index()].kv_tokens()
            * self.instances[inst.index()].cfg.model.kv_bytes_per_token();
        self.charge_kv(inst, req, bytes)?;
        self.instances[inst.index()].prefilled_waiting.push(req);
        Ok(())
    }

    fn charge_kv(&mut self, inst: InstanceId, req: RequestId, bytes: u64) -> Result<(), SimError> {
        let instance = &mut self.instances[inst.index()];
        if instance.kv_used + bytes > instance.cfg.kv_capacity_bytes {
            return Err(SimError::Capacity {
                instance: inst,
                request: req,
                used: instance.kv_used,
                delta: bytes,
                capacity: instance.cfg.kv_capacity_bytes,
            });
        }
        instance.kv_used += bytes;
        self.records[req.index()].kv_residence = Some(inst);
        Ok(())
    }

    /// Release a request's entire KV footprint from the instance holding it.
    pub fn free_request_kv(&mut self, req: RequestId) {
        let record = &mut self.records[req.index()];
        if let Some(inst) = record.kv_residence.take() {
            let bytes = record.kv_tokens() * self.instances[inst.index()].cfg.model.kv_bytes_per_token();
            let instance = &mut self.instances[inst.index()];
            debug_assert!(instance.kv_used >= bytes);
            instance.kv_used -= bytes;
        }
    }

    /// KV headroom remaining on an instance.
    pub fn kv_headroom(&self, inst: InstanceId) -> u64 {
        let i = &self.instances[inst.index()];
        i.cfg.kv_capacity_bytes - i.kv_used
    }

    /// Scheduler-visible load proxy: pending prompt tokens not yet prefilled
    /// plus context tokens held by resident requests.
    pub fn outstanding_tokens(&self, inst: InstanceId) -> u64 {
        let instance = &self.instances[inst.index()];
        let pending: u64 = instance
            .pending_prefills
            .iter()
            .map(|r| self.records[r.index()].input_len - self.prefill_progress[r.index()])
            .sum();
        let resident: u64 = instance
            .active_decodes
            .iter()
            .chain(instance.prefilled_waiting.iter())
            .map(|r| self.records[r.index()].kv_tokens())
            .sum();
        pending + resident
    }

    pub fn prefill_done_tokens(&self, req: RequestId) -> u64 {
        self.prefill_progress[req.index()]
    }

    fn credit_busy(&mut self, inst: InstanceId, start: f64, end: f64) {
        let instance = &mut self.instances[inst.index()];
        instance.busy_time += end - start;
        let mut t = start;
        while t < end {
            let bucket = (t / UTILIZATION_BUCKET) as usize;
            if instance.busy_buckets.len() <= bucket {
                instance.busy_buckets.resize(bucket + 1, 0.0);
            }
            let bucket_end = (bucket as f64 + 1.0) * UTILIZATION_BUCKET;
            let slice_end = bucket_end.min(end);
            instance.busy_buckets[bucket] += slice_end - t;
            t = slice_end;
        }
    }

    fn audit_invariants(&self) -> Result<(), SimError> {
        for (idx, instance) in self.instances.iter().enumerate() {
            let expected: u64 = self
                .records
                .iter()
                .filter(|r| r.kv_residence == Some(InstanceId(idx as u32)))
                .map(|r| r.kv_tokens() * instance.cfg.model.kv_bytes_per_token())
                .sum();
            if expected != instance.kv_used {
                return Err(SimError::Invariant(format!(
                    "kv conservation broken on instance {idx}: tracked {} != recomputed {expected}",
                    instance.kv_used
                )));
            }
            if instance.kv_used > instance.cfg.kv_capacity_bytes {
                return Err(SimError::Invariant(format!(
                    "kv over capacity on instance {idx}"
                )));
            }
        }
        Ok(())
    }
}

/// Strategy interface: routing, intra-instance policy, and periodic hooks.
pub trait Strategy {
    fn name(&self) -> &'static str;

    /// Called once before the first event; schedule periodic timers here.
    fn init(&mut self, state: &mut SimState);

    /// Route (or defer) a newly arrived request.
    fn on_arrival(&mut self, state: &mut SimState, req: RequestId);

    /// Choose the next work item for a free instance.
    fn next_action(&mut self, state: &SimState, inst: InstanceId) -> Action;

    /// Requests whose prompt prefill completed in the batch that just ended.
    fn on_prefill_completed(&mut self, state: &mut SimState, inst: InstanceId, reqs: &[RequestId]) {
        let _ = (state, inst, reqs);
    }

    /// A request finished and left the cluster.
    fn on_request_completed(&mut self, state: &mut SimState, req: RequestId) {
        let _ = (state, req);
    }

    fn on_status_update(&mut self, state: &mut SimState, trigger: StatusTrigger) {
        let _ = (state, trigger);
    }

    fn on_transfer_event(&mut self, state: &mut SimState, req: RequestId, stage: TransferStage, era: u64) {
        let _ = (state, req, stage, era);
    }

    fn on_scale_check(&mut self, state: &mut SimState) {
        let _ = state;
    }
}

/// Outcome of a simulation run.
#[derive(Debug)]
pub struct SimulationResult {
    pub strategy: String,
    pub records: Vec<RequestRecord>,
    pub routing_log: Vec<RouteProbe>,
    pub scaling_log: Vec<ScalingLogEntry>,
    pub instance_stats: Vec<InstanceStats>,
    pub transfer_payload_bytes: u64,
    pub events_processed: u64,
    /// All requests completed before the horizon.
    pub quiescent: bool,
    pub unfinished: usize,
    /// Time of the last processed event.
    pub makespan: f64,
}

#[derive(Debug, Clone)]
pub struct InstanceStats {
    pub instance: InstanceId,
    pub busy_time: f64,
    pub busy_buckets: Vec<f64>,
    pub created_at: f64,
}

/// A configured simulation ready to run.
pub struct Simulation {
    state: SimState,
    strategy: Box<dyn Strategy>,
}

impl Simulation {
    pub fn new(
        instances: Vec<SimInstanceConfig>,
        requests: &[Request],
        strategy: Box<dyn Strategy>,
        horizon: f64,
        prefill_batch_budget: u64,
        audit: bool,
    ) -> Self {
        let mut queue = EventQueue::new();
        let mut records = Vec::with_capacity(requests.len());
        for (i, req) in requests.iter().enumerate() {
            let id = RequestId(i as u32);
            records.push(RequestRecord::new(id, req));
            queue.push(req.arrival_time, EventKind::Arrival(id));
        }
        let state = SimState {
            now: 0.0,
            horizon,
            queue,
            prefill_progress: vec![0; records.len()],
            records,
            instances: instances.into_iter().map(|cfg| Instance::new(cfg, 0.0)).collect(),
            prefill_batch_budget,
            routing_log: Vec::new(),
            scaling_log: Vec::new(),
            transfer_payload_bytes: 0,
            completed: 0,
            events_processed: 0,
            audit,
        };
        Self { state, strategy }
    }

    /// Process all events to quiescence or the time horizon.
    pub fn run(mut self) -> Result<SimulationResult, SimError> {
        self.strategy.init(&mut self.state);
        self.dispatch()?;
        while let Some(event) = self.state.queue.pop() {
            if event.time > self.state.horizon {
                break;
            }
            if self.state.audit && event.time < self.state.now {
                return Err(SimError::Invariant(format!(
                    "clock went backwards: {} -> {}",
                    self.state.now, event.time
                )));
            }
            self.state.now = event.time;
            self.state.events_processed += 1;
            self.handle(event.kind)?;
            // Coalesce equal-time events before offering work, so requests
            // arriving at the same instant batch together.
            if self.state.queue.peek_time() != Some(self.state.now) {
                self.dispatch()?;
            }
            if self.state.audit {
                self.state.audit_invariants()?;
            }
            if !self.state.work_remaining() {
                break;
            }
        }
        let state = self.state;
        let unfinished = state.unfinished();
        Ok(SimulationResult {
            strategy: self.strategy.name().to_string(),
            instance_stats: state
                .instances
                .iter()
                .enumerate()
                .map(|(i, inst)| InstanceStats {
                    instance: InstanceId(i as u32),
                    busy_time: inst.busy_time,
                    busy_buckets: inst.busy_buckets.clone(),
                    created_at: inst.created_at,
                })
                .collect(),
            records: state.records,
            routing_log: state.routing_log,
            scaling_log: state.scaling_log,
            transfer_payload_bytes: state.transfer_payload_bytes,
            events_processed: state.events_processed,
            quiescent: unfinished == 0,
            unfinished,
            makespan: state.now,
        })
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::Arrival(req) => {
                self.strategy.on_arrival(&mut self.state, req);
                Ok(())
            }
            EventKind::PrefillBatchDone(inst) => self.finish_prefill_batch(inst),
            EventKind::DecodeStepDone(inst) => self.finish_step(inst),
            EventKind::KvTransferDone { request, stage, era } => {
                self.strategy.on_transfer_event(&mut self.state, request, stage, era);
                Ok(())
            }
            EventKind::StatusUpdate(trigger) => {
                self.strategy.on_status_update(&mut self.state, trigger);
                Ok(())
            }
            EventKind::ScaleCheck => {
                self.strategy.on_scale_check(&mut self.state);
                Ok(())
            }
        }
    }

    /// Offer work to every free instance.
    fn dispatch(&mut self) -> Result<(), SimError> {
        for idx in 0..self.state.instances.len() {
            let inst = InstanceId(idx as u32);
            if self.state.instances[idx].busy() {
                continue;
            }
            match self.strategy.next_action(&self.state, inst) {
                Action::StartPrefill => self.start_prefill_batch(inst)?,
                Action::DecodeStep => self.start_decode_step(inst, None)?,
                Action::HybridStep { chunk_size, token_budget } => {
                    self.start_decode_step(inst, Some((chunk_size, token_budget)))?
                }
                Action::Idle => {
                    let instance = &mut self.state.instances[idx];
                    instance.phase = InstancePhase::Idle;
                }
            }
        }
        Ok(())
    }

    /// Charge switch overhead and update phase bookkeeping when starting work.
    fn enter_phase(&mut self, inst: InstanceId, phase: Phase) -> f64 {
        let now = self.state.now;
        let switched = {
            let instance = &mut self.state.instances[inst.index()];
            let switched = instance.last_work.is_some() && instance.last_work != Some(phase);
            if instance.last_work != Some(phase) {
                instance.t_switch = now;
                instance.last_work = Some(phase);
            }
            instance.phase = match phase {
                Phase::Prefill => InstancePhase::Prefill,
                Phase::Decode => InstancePhase::Decode,
            };
            switched
        };
        if switched {
            let overhead = self.state.instances[inst.index()].cfg.switch_overhead;
            self.state.schedule(now, EventKind::StatusUpdate(StatusTrigger::PhaseChange(inst)));
            overhead
        } else {
            0.0
        }
    }

    /// FIFO prefill batch formation under the token budget and KV capacity.
    fn form_prefill_batch(&self, inst: InstanceId) -> (Vec<PrefillEntry>, u64) {
        let state = &self.state;
        let instance = &state.instances[inst.index()];
        let budget = state.prefill_batch_budget;
        let mut entries = Vec::new();
        let mut tokens = 0u64;
        let mut planned_charge = 0u64;
        let kvpt = instance.cfg.model.kv_bytes_per_token();
        for &req in &instance.pending_prefills {
            if tokens == budget {
                break;
            }
            let record = &state.records[req.index()];
            let remaining = record.input_len - state.prefill_progress[req.index()];
            let take = remaining.min(budget - tokens);
            let finishes = take == remaining;
            if finishes {
                let charge = record.input_len * kvpt;
                if instance.kv_used + planned_charge + charge > instance.cfg.kv_capacity_bytes {
                    break;
                }
                planned_charge += charge;
            }
            entries.push(PrefillEntry { req, tokens: take, finishes });
            tokens += take;
            if !finishes {
                break;
            }
        }
        (entries, tokens)
    }

    fn start_prefill_batch(&mut self, inst: InstanceId) -> Result<(), SimError> {
        let (entries, tokens) = self.form_prefill_batch(inst);
        if entries.is_empty() {
            // Capacity-blocked: fall back to decode work so KV can free up.
            if self.state.instances[inst.index()].has_decode_work() {
                return self.start_decode_step(inst, None);
            }
            self.state.instances[inst.index()].phase = InstancePhase::Idle;
            return Ok(());
        }
        let overhead = self.enter_phase(inst, Phase::Prefill);
        let now = self.state.now;
        let duration = overhead + prefill_time(&self.state.instances[inst.index()].cfg, tokens);
        self.state.instances[inst.index()].in_flight =
            Some(Work::PrefillBatch { entries, tokens, since: now });
        self.state.schedule(now + duration, EventKind::PrefillBatchDone(inst));
        Ok(())
    }

    /// Start a decode iteration; with `hybrid` parameters it also packs chunks.
    fn start_decode_step(
        &mut self,
        inst: InstanceId,
        hybrid: Option<(u64, u64)>,
    ) -> Result<(), SimError> {
        let now = self.state.now;
        // The prefill window ended: prefilled requests join the decode batch.
        let joining = std::mem::take(&mut self.state.instances[inst.index()].prefilled_waiting);
        for &req in &joining {
            let record = &mut self.state.records[req.index()];
            if record.decode_begin_time.is_none() {
                record.decode_begin_time = Some(now);
            }
        }
        self.state.instances[inst.index()].active_decodes.extend(joining);

        let chunks = match hybrid {
            Some((chunk_size, token_budget)) => {
                self.form_chunks(inst, chunk_size, token_budget)
            }
            None => Vec::new(),
        };

        let instance = &self.state.instances[inst.index()];
        let kvpt = instance.cfg.model.kv_bytes_per_token();
        // Every decode participant grows by one token this iteration. Under
        // memory saturation the batch is limited to the oldest requests that
        // still fit; the youngest stall until capacity frees up.
        let headroom_tokens = (instance.cfg.kv_capacity_bytes - instance.kv_used) / kvpt;
        let batch: Vec<RequestId> = instance
            .active_decodes
            .iter()
            .copied()
            .take(headroom_tokens as usize)
            .collect();
        if batch.is_empty() && chunks.is_empty() {
            self.state.instances[inst.index()].phase = InstancePhase::Idle;
            return Ok(());
        }
        let total_kv: u64 = batch
            .iter()
            .map(|r| self.state.records[r.index()].kv_tokens())
            .sum();

        let chunk_works: Vec<ChunkWork> = chunks
            .iter()
            .map(|e| ChunkWork {
                tokens: e.tokens,
                context: self.state.prefill_progress[e.req.index()],
            })
            .collect();
        let cfg = &self.state.instances[inst.index()].cfg;
        let step = if chunks.is_empty() {
            decode_step_time(cfg, batch.len() as u64, total_kv)
        } else {
            hybrid_step_time(cfg, batch.len() as u64, total_kv, &chunk_works)
        };
        let overhead = self.enter_phase(inst, Phase::Decode);
        let work = if chunks.is_empty() {
            Work::DecodeStep { batch, since: now }
        } else {
            Work::HybridStep { batch, chunks, since: now }
        };
        self.state.instances[inst.index()].in_flight = Some(work);
        self.state.schedule(now + overhead + step, EventKind::DecodeStepDone(inst));
        Ok(())
    }

    /// Pack prefill chunks for a hybrid iteration: FIFO over pending prompts,
    /// at most `chunk_size` tokens per prompt, decode tokens counted against
    /// the budget.
    fn form_chunks(&self, inst: InstanceId, chunk_size: u64, token_budget: u64) -> Vec<PrefillEntry> {
        let state = &self.state;
        let instance = &state.instances[inst.index()];
        let decode_tokens = instance.active_decodes.len() as u64;
        let mut avail = token_budget.saturating_sub(decode_tokens);
        let kvpt = instance.cfg.model.kv_bytes_per_token();
        let mut planned_charge = instance.active_decodes.len() as u64 * kvpt;
        let mut chunks = Vec::new();
        for &req in &instance.pending_prefills {
            if avail == 0 {
                break;
            }
            let record = &state.records[req.index()];
            let remaining = record.input_len - state.prefill_progress[req.index()];
            let take = remaining.min(chunk_size).min(avail);
            if take == 0 {
                break;
            }
            let finishes = take == remaining;
            if finishes {
                let charge = record.input_len * kvpt;
                if instance.kv_used + planned_charge + charge > instance.cfg.kv_capacity_bytes {
                    break;
                }
                planned_charge += charge;
            }
            chunks.push(PrefillEntry { req, tokens: take, finishes });
            avail -= take;
            if !finishes {
                break;
            }
        }
        chunks
    }

    fn finish_prefill_batch(&mut self, inst: InstanceId) -> Result<(), SimError> {
        let work = self.state.instances[inst.index()].in_flight.take();
        let Some(Work::PrefillBatch { entries, since, .. }) = work else {
            return Err(SimError::Invariant(format!(
                "PrefillBatchDone on instance {inst} without an in-flight prefill batch"
            )));
        };
        let now = self.state.now;
        self.state.credit_busy(inst, since, now);
        let completed = self.apply_prefill_entries(inst, &entries)?;
        if !completed.is_empty() {
            self.strategy.on_prefill_completed(&mut self.state, inst, &completed);
        }
        Ok(())
    }

    fn apply_prefill_entries(
        &mut self,
        inst: InstanceId,
        entries: &[PrefillEntry],
    ) -> Result<Vec<RequestId>, SimError> {
        let now = self.state.now;
        let mut completed = Vec::new();
        for entry in entries {
            self.state.prefill_progress[entry.req.index()] += entry.tokens;
            if entry.finishes {
                let front = self.state.instances[inst.index()].pending_prefills.pop_front();
                debug_assert_eq!(front, Some(entry.req), "prefill batch must be a FIFO prefix");
                let input_len = self.state.records[entry.req.index()].input_len;
                debug_assert_eq!(self.state.prefill_progress[entry.req.index()], input_len);
                self.state.records[entry.req.index()].prefill_end_time = Some(now);
                let kvpt = self.state.instances[inst.index()].cfg.model.kv_bytes_per_token();
                self.state.charge_kv(inst, entry.req, input_len * kvpt)?;
                self.state.instances[inst.index()].prefilled_waiting.push(entry.req);
                completed.push(entry.req);
            }
        }
        Ok(completed)
    }

    fn finish_step(&mut self, inst: InstanceId) -> Result<(), SimError> {
        let work = self.state.instances[inst.index()].in_flight.take();
        let (batch, chunks, since) = match work {
            Some(Work::DecodeStep { batch, since }) => (batch, Vec::new(), since),
            Some(Work::HybridStep { batch, chunks, since }) => (batch, chunks, since),
            _ => {
                return Err(SimError::Invariant(format!(
                    "DecodeStepDone on instance {inst} without an in-flight step"
                )))
            }
        };
        let now = self.state.now;
        self.state.credit_busy(inst, since, now);

        let kvpt = self.state.instances[inst.index()].cfg.model.kv_bytes_per_token();
        let mut completed_reqs = Vec::new();
        for req in batch {
            self.state.records[req.index()].tokens_generated += 1;
            self.state.charge_kv(inst, req, kvpt)?;
            let record = &self.state.records[req.index()];
            if record.tokens_generated == record.true_output_len {
                self.state.records[req.index()].completion_time = Some(now);
                self.state.free_request_kv(req);
                let actives = &mut self.state.instances[inst.index()].active_decodes;
                actives.retain(|&r| r != req);
                self.state.completed += 1;
                completed_reqs.push(req);
            }
        }
        let prefill_done = self.apply_prefill_entries(inst, &chunks)?;
        if !prefill_done.is_empty() {
            self.strategy.on_prefill_completed(&mut self.state, inst, &prefill_done);
        }
        for req in completed_reqs {
            self.strategy.on_request_completed(&mut self.state, req);
        }
        Ok(())
    }
}
