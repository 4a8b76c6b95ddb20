//! CSV rendering of simulation outputs.
//!
//! All writers are deterministic: floats use Rust's shortest round-trip
//! formatting and row order follows record/log order, so identical runs
//! produce byte-identical files.

use crate::engine::{RouteProbe, ScalingLogEntry, SimulationResult};
use crate::metrics::{attainment, all_metrics, output_token_rate, AttainmentBucket};
use crate::workload::SloConfig;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-request CSV:
/// `request_id,arrival,input_len,output_len,instance,reported_ttft,switch_wait,tpot,ttft_ok,tpot_ok`.
pub fn per_request_csv(result: &SimulationResult, slo: &SloConfig) -> String {
    let mut out = String::from(
        "request_id,arrival,input_len,output_len,instance,reported_ttft,switch_wait,tpot,ttft_ok,tpot_ok\n",
    );
    for record in &result.records {
        let m = crate::metrics::request_metrics(record, slo);
        let instance = record
            .routed_instance
            .map(|i| i.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            record.id,
            record.arrival_time,
            record.input_len,
            record.true_output_len,
            instance,
            opt(m.reported_ttft),
            opt(m.switch_wait),
            opt(m.tpot),
            u8::from(m.ttft_ok),
            u8::from(m.tpot_ok),
        ));
    }
    out
}

/// One summary row per run:
/// `scenario,strategy,rate,attainment_p50,attainment_p90,attainment_p99,requests,unfinished,goodput_req_s,goodput_tok_s`.
pub fn summary_csv(scenario: &str, rate: f64, result: &SimulationResult, slo: &SloConfig) -> String {
    let metrics = all_metrics(&result.records, slo);
    let frac = |p: f64| {
        attainment(&metrics, p)
            .map(|(f, _)| f.to_string())
            .unwrap_or_default()
    };
    let completed = result.records.iter().filter(|r| r.finished()).count();
    let req_rate = if result.makespan > 0.0 {
        completed as f64 / result.makespan
    } else {
        0.0
    };
    let mut out = String::from(
        "scenario,strategy,rate,attainment_p50,attainment_p90,attainment_p99,requests,unfinished,goodput_req_s,goodput_tok_s\n",
    );
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        scenario,
        result.strategy,
        rate,
        frac(0.50),
        frac(0.90),
        frac(0.99),
        result.records.len(),
        result.unfinished,
        req_rate,
        output_token_rate(result),
    ));
    out
}

/// Routing log CSV: `time,request_id,macro_id,instance_id,outcome,routed`.
pub fn routing_csv(log: &[RouteProbe]) -> String {
    let mut out = String::from("time,request_id,macro_id,instance_id,outcome,routed\n");
    for probe in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            probe.time,
            probe.request,
            probe.macro_id,
            probe.instance,
            probe.outcome.as_str(),
            u8::from(probe.routed),
        ));
    }
    out
}

/// Scaling log CSV: `time,action,sizes_before,sizes_after` with sizes joined
/// by `;`.
pub fn scaling_csv(log: &[ScalingLogEntry]) -> String {
    let mut out = String::from("time,action,sizes_before,sizes_after\n");
    let join = |sizes: &[usize]| {
        sizes
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";")
    };
    for entry in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            entry.time,
            entry.action,
            join(&entry.sizes_before),
            join(&entry.sizes_after),
        ));
    }
    out
}

/// Attainment timeline CSV: `bucket_start,completed,attainment`.
pub fn timeline_csv(buckets: &[AttainmentBucket]) -> String {
    let mut out = String::from("bucket_start,completed,attainment\n");
    for b in buckets {
        out.push_str(&format!("{},{},{}\n", b.start, b.completed, b.fraction));
    }
    out
}

/// Instance utilization CSV: `instance,bucket_start,busy_fraction`.
pub fn utilization_csv(result: &SimulationResult) -> String {
    let mut out = String::from("instance,bucket_start,busy_fraction\n");
    for stats in &result.instance_stats {
        for (i, busy) in stats.busy_buckets.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                stats.instance,
                i as f64 * crate::engine::UTILIZATION_BUCKET,
                busy / crate::engine::UTILIZATION_BUCKET,
            ));
        }
    }
    out
}
