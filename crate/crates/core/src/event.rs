//! Timestamped simulation events with deterministic tie-breaking.

use crate::request::{InstanceId, RequestId};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Event payloads, one variant per event kind.
#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// A request arrives at the cluster.
    Arrival(RequestId),
    /// An instance finished the prefill batch it was executing.
    PrefillBatchDone(InstanceId),
    /// An instance finished one decode (or hybrid) iteration.
    DecodeStepDone(InstanceId),
    /// A KV transfer progressed; `era` guards against stale reschedules of
    /// the fair-share link.
    KvTransferDone { request: RequestId, stage: TransferStage, era: u64 },
    /// Status refresh: periodic or triggered by a phase transition.
    StatusUpdate(StatusTrigger),
    /// Scaling-policy evaluation point.
    ScaleCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferStage {
    /// Wire bytes fully drained through the shared link.
    Drained,
    /// Fixed per-hop latency elapsed; KV is available at the destination side.
    Delivered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusTrigger {
    Periodic,
    PhaseChange(InstanceId),
}

/// A scheduled event. Events are processed in `(time, seq)` lexicographic
/// order; `seq` is assigned by a single monotone counter at creation, so
/// equal-time events replay in creation order regardless of heap internals.
#[derive(Debug, Clone)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the earliest event.
        // Event times are finite by construction, so total order is safe.
        other
            .time
            .partial_cmp(&self.time)
            .expect("event times are never NaN")
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-heap of events with the deterministic sequence counter.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, kind: EventKind) {
        assert!(time.is_finite(), "event time must be finite");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_pop_in_time_then_seq_order() {
        let mut q = EventQueue::new();
        q.push(2.0, EventKind::ScaleCheck);
        q.push(1.0, EventKind::Arrival(RequestId(0)));
        q.push(1.0, EventKind::Arrival(RequestId(1)));
        q.push(0.5, EventKind::ScaleCheck);

        let order: Vec<(f64, u64)> = std::iter::from_fn(|| q.pop()).map(|e| (e.time, e.seq)).collect();
        assert_eq!(order, vec![(0.5, 3), (1.0, 1), (1.0, 2), (2.0, 0)]);
    }

    #[test]
    fn equal_time_events_replay_in_creation_order() {
        // Two queues receiving the same events in the same creation order pop
        // identically even though heap internals may differ.
        let mut a = EventQueue::new();
        let mut b = EventQueue::new();
        for q in [&mut a, &mut b] {
            for i in 0..32 {
                q.push(1.0, EventKind::Arrival(RequestId(i)));
            }
        }
        for _ in 0..32 {
            assert_eq!(a.pop().unwrap().kind, b.pop().unwrap().kind);
        }
    }
}
