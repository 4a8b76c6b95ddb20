//! Mitosis scaling: instance-granularity expansion and contraction within
//! macro instances, with split/merge at the size thresholds and logical
//! instance migration through a serializable proxy handler.
//!
//! Expansion adds instances to the oldest non-full macro; when every macro is
//! full, the next add splits the oldest macro, detaching its `n_lower` most
//! recently added instances into a new macro. Contraction merges the two
//! smallest macros (after one more removal) once their combined size reaches
//! `n_upper`, and otherwise removes from the smallest macro still above
//! `n_lower`. The cluster therefore holds full macros plus at most two
//! partially filled ones.

use crate::engine::{ScalingLogEntry, SimState};
use crate::request::InstanceId;
use crate::sched::padg::PadgScheduler;
use crate::workload::SloConfig;
use crate::SimInstanceConfig;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Thresholds and triggers for mitosis scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingPolicy {
    /// Lower bound on instances per macro.
    pub n_lower: usize,
    /// Upper bound on instances per macro.
    pub n_upper: usize,
    /// Scale up when sliding-window SLO attainment falls below this.
    pub target_attainment: f64,
    /// Attainment window for the scale-up trigger, seconds.
    pub scale_up_window: f64,
    /// Scale down when mean utilization stays below this...
    pub scale_down_util: f64,
    /// ...for this long, seconds.
    pub scale_down_sustain: f64,
    /// Unavailability window of a migrated instance, seconds.
    pub migration_overhead: f64,
    /// Cost of tearing down and re-initializing an instance instead of
    /// migrating it; reporting only.
    pub reinit_cost: f64,
    /// Minimum gap between scaling actions, seconds.
    pub cooldown: f64,
}

impl Default for ScalingPolicy {
    fn default() -> Self {
        Self {
            n_lower: 3,
            n_upper: 6,
            target_attainment: 0.9,
            scale_up_window: 30.0,
            scale_down_util: 0.4,
            scale_down_sustain: 60.0,
            migration_overhead: 0.1,
            reinit_cost: 180.0,
            cooldown: 30.0,
        }
    }
}

impl ScalingPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(1 <= self.n_lower && self.n_lower <= self.n_upper) {
            return Err(format!(
                "need 1 <= n_lower <= n_upper, got {} and {}",
                self.n_lower, self.n_upper
            ));
        }
        // Split leaves the donor with n_upper + 1 - n_lower instances, which
        // must not fall below n_lower.
        if self.n_upper + 1 < 2 * self.n_lower {
            return Err(format!(
                "n_upper {} too small for n_lower {}: a split would leave the donor below n_lower",
                self.n_upper, self.n_lower
            ));
        }
        if self.migration_overhead < 0.0 || self.cooldown < 0.0 {
            return Err("overheads must be >= 0".into());
        }
        Ok(())
    }
}

/// Direction decided by the triggers; the walk decides the concrete action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleTrigger {
    Up,
    Down,
    Hold,
}

/// Concrete scaling action over macro indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingAction {
    AddInstance { target: usize },
    RemoveInstance { target: usize },
    /// Provision one instance into `target`, then detach its `n_lower` most
    /// recent instances into a new macro.
    Split { target: usize },
    /// Remove one instance from the union, then fold `absorb` into `keep`.
    Merge { keep: usize, absorb: usize },
    None,
}

impl ScalingAction {
    pub fn label(&self) -> &'static str {
        match self {
            ScalingAction::AddInstance { .. } => "add",
            ScalingAction::RemoveInstance { .. } => "remove",
            ScalingAction::Split { .. } => "split",
            ScalingAction::Merge { .. } => "merge",
            ScalingAction::None => "none",
        }
    }
}

/// Size and age of one macro instance, the inputs the walk needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacroView {
    pub size: usize,
    pub created_seq: u64,
}

/// One step of the expansion/contraction walk. At most one action per call.
pub fn scale_step(macros: &[MacroView], trigger: ScaleTrigger, policy: &ScalingPolicy) -> ScalingAction {
    match trigger {
        ScaleTrigger::Hold => ScalingAction::None,
        ScaleTrigger::Up => {
            // Fill the oldest partially filled macro back to n_upper first.
            if let Some((idx, _)) = macros
                .iter()
                .enumerate()
                .filter(|(_, m)| m.size < policy.n_upper)
                .min_by_key(|(_, m)| m.created_seq)
            {
                ScalingAction::AddInstance { target: idx }
            } else if let Some((idx, _)) = macros.iter().enumerate().min_by_key(|(_, m)| m.created_seq) {
                ScalingAction::Split { target: idx }
            } else {
                ScalingAction::None
            }
        }
        ScaleTrigger::Down => {
            if macros.len() >= 2 {
                let mut order: Vec<usize> = (0..macros.len()).collect();
                order.sort_by_key(|&i| (macros[i].size, macros[i].created_seq));
                let (x, y) = (order[0], order[1]);
                if macros[x].size + macros[y].size <= policy.n_upper {
                    let (keep, absorb) = if macros[x].created_seq <= macros[y].created_seq {
                        (x, y)
                    } else {
                        (y, x)
                    };
                    return ScalingAction::Merge { keep, absorb };
                }
            }
            if let Some((idx, _)) = macros
                .iter()
                .enumerate()
                .filter(|(_, m)| m.size > policy.n_lower)
                .min_by_key(|(_, m)| (m.size, m.created_seq))
            {
                ScalingAction::RemoveInstance { target: idx }
            } else {
                ScalingAction::None
            }
        }
    }
}

/// Apply an action to bare macro sizes. Mirrors what the scheduler does to
/// real macros; used to replay walks against the `scale_step` oracle.
pub fn apply_to_sizes(
    macros: &mut Vec<MacroView>,
    action: ScalingAction,
    policy: &ScalingPolicy,
    next_seq: &mut u64,
) {
    match action {
        ScalingAction::AddInstance { target } => macros[target].size += 1,
        ScalingAction::RemoveInstance { target } => macros[target].size -= 1,
        ScalingAction::Split { target } => {
            macros[target].size += 1;
            macros[target].size -= policy.n_lower;
            macros.push(MacroView { size: policy.n_lower, created_seq: *next_seq });
            *next_seq += 1;
        }
        ScalingAction::Merge { keep, absorb } => {
            macros[keep].size += macros[absorb].size - 1;
            macros.remove(absorb);
        }
        ScalingAction::None => {}
    }
}

/// Serializable proxy metadata enabling logical migration of an instance
/// between macro-instance schedulers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceHandler {
    pub actor_id: u64,
    pub worker_address: String,
    pub model: String,
    pub device: String,
    pub tp_degree: u32,
}

pub const HANDLER_VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HandlerCodecError {
    #[error("unknown handler serialization version {found} (expected {HANDLER_VERSION})")]
    VersionMismatch { found: u8 },
    #[error("handler bytes truncated")]
    Truncated,
    #[error("handler field is not valid UTF-8")]
    InvalidUtf8,
}

impl InstanceHandler {
    /// Length-prefixed encoding with a leading version byte:
    /// `[version u8][actor_id u64 LE]` then `worker_address`, `model`,
    /// `device` each as `[len u32 LE][bytes]`, then `[tp_degree u32 LE]`.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = vec![HANDLER_VERSION];
        out.extend_from_slice(&self.actor_id.to_le_bytes());
        for field in [&self.worker_address, &self.model, &self.device] {
            out.extend_from_slice(&(field.len() as u32).to_le_bytes());
            out.extend_from_slice(field.as_bytes());
        }
        out.extend_from_slice(&self.tp_degree.to_le_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, HandlerCodecError> {
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], HandlerCodecError> {
            let end = *cursor + n;
            if end > bytes.len() {
                return Err(HandlerCodecError::Truncated);
            }
            let slice = &bytes[*cursor..end];
            *cursor = end;
            Ok(slice)
        };
        let version = take(&mut cursor, 1)?[0];
        if version != HANDLER_VERSION {
            return Err(HandlerCodecError::VersionMismatch { found: version });
        }
        let actor_id = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
        let mut strings = Vec::with_capacity(3);
        for _ in 0..3 {
            let len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let s = std::str::from_utf8(take(&mut cursor, len)?)
                .map_err(|_| HandlerCodecError::InvalidUtf8)?
                .to_string();
            strings.push(s);
        }
        let tp_degree = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        let device = strings.pop().unwrap();
        let model = strings.pop().unwrap();
        let worker_address = strings.pop().unwrap();
        Ok(Self { actor_id, worker_address, model, device, tp_degree })
    }
}

/// Logical migration of a handler between macro schedulers: serialize,
/// transfer, deserialize; ownership moves at `now + migration_overhead`.
/// In-flight work on the instance itself is untouched.
pub fn migrate(
    handler: &InstanceHandler,
    now: f64,
    migration_overhead: f64,
) -> Result<(InstanceHandler, f64), HandlerCodecError> {
    let reconstructed = InstanceHandler::deserialize(&handler.serialize())?;
    Ok((reconstructed, now + migration_overhead))
}

/// Trigger source: live policy evaluation, or a scripted sequence for
/// experiments and replay tests.
#[derive(Debug)]
pub enum TriggerSource {
    Policy,
    Scripted(VecDeque<(f64, ScaleTrigger)>),
}

/// Runtime state of the mitosis controller attached to a PaDG scheduler.
#[derive(Debug)]
pub struct MitosisController {
    pub policy: ScalingPolicy,
    pub slo: SloConfig,
    pub template: SimInstanceConfig,
    /// Hard cap on live instances (all GPUs in the cluster).
    pub max_instances: usize,
    /// Gap between ScaleCheck events, seconds.
    pub sample_period: f64,
    pub trigger_source: TriggerSource,
    last_action_time: f64,
}

impl MitosisController {
    pub fn new(
        policy: ScalingPolicy,
        slo: SloConfig,
        template: SimInstanceConfig,
        max_instances: usize,
        sample_period: f64,
        trigger_source: TriggerSource,
    ) -> Self {
        policy.validate().expect("valid scaling policy");
        Self {
            policy,
            slo,
            template,
            max_instances,
            sample_period,
            trigger_source,
            last_action_time: f64::NEG_INFINITY,
        }
    }

    fn window_attainment(&self, state: &SimState) -> Option<f64> {
        let from = state.now - self.policy.scale_up_window;
        let mut n = 0usize;
        let mut ok = 0usize;
        for record in &state.records {
            if let Some(c) = record.completion_time {
                if c > from && c <= state.now {
                    n += 1;
                    if crate::metrics::request_metrics(record, &self.slo).slo_ok() {
                        ok += 1;
                    }
                }
            }
        }
        (n > 0).then(|| ok as f64 / n as f64)
    }

    fn mean_utilization(&self, state: &SimState, live: &[InstanceId]) -> Option<f64> {
        if state.now < self.policy.scale_down_sustain || live.is_empty() {
            return None;
        }
        let from = state.now - self.policy.scale_down_sustain;
        let width = crate::engine::UTILIZATION_BUCKET;
        let mut total = 0.0;
        for &inst in live {
            let buckets = &state.instance(inst).busy_buckets;
            for (i, busy) in buckets.iter().enumerate() {
                let start = i as f64 * width;
                if start >= from && start < state.now {
                    total += busy;
                }
            }
        }
        Some(total / (self.policy.scale_down_sustain * live.len() as f64))
    }

    fn evaluate_trigger(&mut self, state: &SimState, live: &[InstanceId]) -> ScaleTrigger {
        match &mut self.trigger_source {
            TriggerSource::Scripted(queue) => {
                if queue.front().is_some_and(|(t, _)| *t <= state.now) {
                    queue.pop_front().unwrap().1
                } else {
                    ScaleTrigger::Hold
                }
            }
            TriggerSource::Policy => {
                if state.now - self.last_action_time < self.policy.cooldown {
                    return ScaleTrigger::Hold;
                }
                if let Some(frac) = self.window_attainment(state) {
                    if frac < self.policy.target_attainment {
                        return ScaleTrigger::Up;
                    }
                }
                if let Some(util) = self.mean_utilization(state, live) {
                    if util < self.policy.scale_down_util {
                        return ScaleTrigger::Down;
                    }
                }
                ScaleTrigger::Hold
            }
        }
    }
}

/// Evaluate triggers and apply at most one scaling action to the scheduler's
/// macros and the engine's instance set.
pub fn run_scale_check(padg: &mut PadgScheduler, state: &mut SimState) {
    let live: Vec<InstanceId> = padg
        .macros
        .iter()
        .flat_map(|m| m.instances.iter().copied())
        .collect();
    let views: Vec<MacroView> = padg
        .macros
        .iter()
        .map(|m| MacroView { size: m.instances.len(), created_seq: m.id as u64 })
        .collect();

    let Some(controller) = padg.scaling.as_mut() else { return };
    let trigger = controller.evaluate_trigger(state, &live);
    let mut action = scale_step(&views, trigger, &controller.policy);

    // Respect the cluster-wide instance cap for provisioning actions.
    let needs_provision = matches!(
        action,
        ScalingAction::AddInstance { .. } | ScalingAction::Split { .. }
    );
    if needs_provision && live.len() >= controller.max_instances {
        action = ScalingAction::None;
    }
    if action == ScalingAction::None {
        return;
    }

    let sizes_before: Vec<usize> = padg.macros.iter().map(|m| m.instances.len()).collect();
    let now = state.now;
    let policy = padg.scaling.as_ref().unwrap().policy.clone();
    match action {
        ScalingAction::AddInstance { target } => {
            let template = padg.scaling.as_ref().unwrap().template.clone();
            let inst = state.add_instance(template);
            padg.note_new_instance(state, inst);
            padg.macros[target].instances.push(inst);
        }
        ScalingAction::RemoveInstance { target } => {
            remove_most_recent(padg, state, target);
        }
        ScalingAction::Split { target } => {
            let template = padg.scaling.as_ref().unwrap().template.clone();
            let inst = state.add_instance(template);
            padg.note_new_instance(state, inst);
            padg.macros[target].instances.push(inst);
            let donor = &mut padg.macros[target];
            let detach_at = donor.instances.len() - policy.n_lower;
            let detached: Vec<InstanceId> = donor.instances.split_off(detach_at);
            donor.prev_idx %= donor.instances.len().max(1);
            let new_id = padg.fresh_macro_id();
            let mut new_macro = crate::sched::padg::MacroInstance::new(new_id, detached.clone());
            new_macro.prev_idx = 0;
            padg.macros.push(new_macro);
            for inst in detached {
                migrate_instance(state, inst, now, policy.migration_overhead);
            }
        }
        ScalingAction::Merge { keep, absorb } => {
            remove_most_recent(padg, state, absorb);
            let moved: Vec<InstanceId> = padg.macros[absorb].instances.drain(..).collect();
            for inst in &moved {
                migrate_instance(state, *inst, now, policy.migration_overhead);
            }
            padg.macros[keep].instances.extend(moved);
            padg.macros.remove(absorb);
            for m in &mut padg.macros {
                m.prev_idx %= m.instances.len().max(1);
            }
        }
        ScalingAction::None => unreachable!(),
    }
    let sizes_after: Vec<usize> = padg.macros.iter().map(|m| m.instances.len()).collect();
    state.scaling_log.push(ScalingLogEntry {
        time: now,
        action: action.label().to_string(),
        sizes_before,
        sizes_after,
    });
    if let Some(controller) = padg.scaling.as_mut() {
        controller.last_action_time = now;
    }
}

/// Drain the most recently added instance of a macro out of the cluster; its
/// admitted requests run to completion.
fn remove_most_recent(padg: &mut PadgScheduler, state: &mut SimState, macro_idx: usize) {
    if let Some(inst) = padg.macros[macro_idx].instances.pop() {
        state.mark_draining(inst);
        let m = &mut padg.macros[macro_idx];
        m.prev_idx %= m.instances.len().max(1);
    }
}

/// Move one instance's handler through the serialize/transfer/deserialize
/// path and block routing to it until the migration completes. The
/// instance's in-flight work continues untouched.
fn migrate_instance(state: &mut SimState, inst: InstanceId, now: f64, overhead: f64) {
    let cfg = &state.instance(inst).cfg;
    let handler = InstanceHandler {
        actor_id: inst.0 as u64,
        worker_address: format!("sim://instance/{inst}"),
        model: cfg.model.name.clone(),
        device: cfg.device.name.clone(),
        tp_degree: cfg.tp_degree as u32,
    };
    let (reconstructed, completion) =
        migrate(&handler, now, overhead).expect("bundled handler version is current");
    debug_assert_eq!(reconstructed, handler);
    state.instances[inst.index()].routable_after = completion;
}
