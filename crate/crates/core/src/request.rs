//! Requests and their timing lifecycle.

use serde::{Deserialize, Serialize};

/// Index of a request within a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u32);

impl RequestId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for RequestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of an inference instance within a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceId(pub u32);

impl InstanceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for InstanceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A serving request as produced by the workload generator or a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub arrival_time: f64,
    pub input_len: u64,
    /// Number of decode tokens the request will generate. Consumed only by
    /// the engine for termination; schedulers never read it.
    pub output_len: u64,
    pub app: Option<String>,
}

/// Full timing lifecycle of one request.
///
/// `prefill_end_time` is the first-token timestamp; `decode_begin_time` is
/// the start of the first steady decode iteration that includes the request,
/// after any phase-switching wait. `tokens_generated` counts decode-produced
/// tokens (the prefill's first token is not included), so a request completes
/// after exactly `true_output_len` decode iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub id: RequestId,
    pub arrival_time: f64,
    pub input_len: u64,
    pub true_output_len: u64,
    pub app: Option<String>,
    pub routed_instance: Option<InstanceId>,
    pub prefill_end_time: Option<f64>,
    pub decode_begin_time: Option<f64>,
    pub tokens_generated: u64,
    pub completion_time: Option<f64>,
    /// Instance currently holding this request's KV cache, if any.
    pub kv_residence: Option<InstanceId>,
    /// Set if admission went through a deferred (macro-queue) period.
    pub was_deferred: bool,
}

impl RequestRecord {
    pub fn new(id: RequestId, req: &Request) -> Self {
        Self {
            id,
            arrival_time: req.arrival_time,
            input_len: req.input_len,
            true_output_len: req.output_len,
            app: req.app.clone(),
            routed_instance: None,
            prefill_end_time: None,
            decode_begin_time: None,
            tokens_generated: 0,
            completion_time: None,
            kv_residence: None,
            was_deferred: false,
        }
    }

    pub fn finished(&self) -> bool {
        self.completion_time.is_some()
    }

    /// KV tokens currently held by this request (prompt plus generated).
    pub fn kv_tokens(&self) -> u64 {
        self.input_len + self.tokens_generated
    }
}

/// Scheduler-visible view of a request: everything except the true output
/// length, which remains unknown until inference completes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestInfo {
    pub id: RequestId,
    pub arrival_time: f64,
    pub input_len: u64,
}

impl RequestInfo {
    pub fn of(record: &RequestRecord) -> Self {
        Self {
            id: record.id,
            arrival_time: record.arrival_time,
            input_len: record.input_len,
        }
    }
}
