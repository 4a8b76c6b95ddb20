//! Acceptance suite: one test per shipped criterion, each printing a PASS
//! line (run with `--nocapture` to see them). Tolerances are pinned in the
//! assertions.

mod common;

use common::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use servesim_core::cost::{required_kv_bandwidth, InstanceConfig};
use servesim_core::engine::{ProbeOutcome, Simulation, SimulationResult};
use servesim_core::metrics::{
    all_metrics, attainment, attainment_timeline, goodput_search, MetricsError,
};
use servesim_core::profiles;
use servesim_core::report;
use servesim_core::request::{InstanceId, RequestId, RequestInfo};
use servesim_core::scaling::{
    apply_to_sizes, scale_step, MacroView, MitosisController, ScaleTrigger, ScalingAction,
    ScalingPolicy, TriggerSource,
};
use servesim_core::scenario::{
    run_scenario, ClusterSpec, ScalingSpec, Scenario, StrategySpec, WorkloadSource,
};
use servesim_core::sched::padg::{
    check_constraints, CheckParams, ConstraintKind, ConstraintOutcome, InstanceStatus,
    PadgConfig, PadgScheduler, StatusEntry,
};
use servesim_core::workload::{preset, RatePlan, RateStep, SloConfig};
use std::collections::VecDeque;

const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

fn pass(n: u32, what: &str) {
    println!("ACCEPTANCE {n}: PASS — {what}");
}

/// ShareGPT on calibrated Llama-30B/L20 instances with a realistic 20 ms
/// phase-switch cost; the configuration under which capacity was measured.
fn llama_sharegpt_scenario(
    strategy: StrategySpec,
    instances: usize,
    rate: f64,
    duration: f64,
    seed: u64,
) -> Scenario {
    let p = preset("sharegpt").unwrap();
    let spec = p.workload(RatePlan::Constant(rate), duration, seed).unwrap();
    Scenario {
        name: "sharegpt-llama30b-l20".into(),
        seed,
        horizon: duration + 300.0,
        slo: p.slo,
        workload: WorkloadSource::Synthetic(spec),
        strategy,
        cluster: ClusterSpec {
            profile: profiles::bundled("llama-30b-l20").unwrap(),
            instances,
            tp_degree: 4,
            comm_overhead_fraction: 0.0,
            switch_overhead: 0.02,
            per_layer_overhead: 0.0,
            kv_capacity_bytes: None,
            max_prefill_batch_tokens: 4096,
            macros: None,
        },
        scaling: None,
        audit: false,
    }
}

fn padg_strategy() -> StrategySpec {
    StrategySpec::Padg { status_period: 0.05, staleness_factor: 4.0, reservation_tokens: None }
}

// --- Criterion 1: bandwidth oracle -----------------------------------------

#[test]
fn criterion_1_required_bandwidth_reproduces_published_table() {
    let llama = profiles::bundled("llama-30b-l20").unwrap().model;
    let code = profiles::bundled("codellama-34b-l20").unwrap().model;
    let rows: [(&servesim_core::ModelProfile, f64, f64); 4] = [
        (&llama, 6584.6, 9.796),
        (&llama, 26189.2, 38.96),
        (&code, 6838.92, 1.25),
        (&code, 25978.88, 4.76),
    ];
    for (model, tokens_per_s, expect_gib) in rows {
        let got = required_kv_bandwidth::<f64>(model, tokens_per_s) / GIB;
        let err = (got - expect_gib).abs() / expect_gib;
        assert!(
            err < 0.01,
            "{} @ {tokens_per_s} tok/s: {got:.4} GiB/s vs {expect_gib} ({:.2}% off)",
            model.name,
            err * 100.0
        );
    }
    pass(1, "all four bandwidth-requirement rows within 1%");
}

// --- Criterion 2: KV sizing --------------------------------------------------

#[test]
fn criterion_2_kv_sizing() {
    let llama = profiles::bundled("llama-30b-l20").unwrap().model;
    assert_eq!(llama.kv_bytes_per_token(), 1_597_440);
    // 128 requests averaging 300 tokens of context.
    let total = 128u64 * 300 * llama.kv_bytes_per_token();
    let total_gib = total as f64 / GIB;
    let err = (total_gib - 58.4).abs() / 58.4;
    assert!(err < 0.05, "128x300 tokens = {total_gib:.2} GiB vs 58.4 ({:.2}% off)", err * 100.0);
    pass(2, "per-token KV exact; 128x300-token footprint within 5%");
}

// --- Criterion 3: admission-check fidelity ----------------------------------

/// Straight-line re-evaluation of the three admission constraints, kept
/// deliberately independent of the implementation.
fn brute_force_check(
    status: &InstanceStatus,
    req: &RequestInfo,
    slo: SloConfig,
    staleness_bound: f64,
    predictor: &dyn Fn(u64) -> f64,
    kv_estimate: u64,
    now: f64,
) -> Result<ConstraintOutcome, ()> {
    if now - status.snapshot_time > staleness_bound {
        return Err(());
    }
    let mut t_total = predictor(req.input_len);
    for r in &status.requests {
        if r.arrival_time >= status.t_switch {
            t_total += predictor(r.input_len);
        }
    }
    if t_total > slo.slo_ttft {
        return Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::Ttft));
    }
    let mut saved = Vec::new();
    for r in &status.requests {
        if r.arrival_time < status.t_switch {
            if let Some(ft) = r.first_token_time {
                saved.push(r.tokens_generated as f64 * slo.slo_tpot - (now - ft));
            }
        }
    }
    if !saved.is_empty() {
        let mean = saved.iter().sum::<f64>() / saved.len() as f64;
        if mean < t_total {
            return Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::Tpot));
        }
    }
    if kv_estimate > status.kv_capacity.saturating_sub(status.kv_used) {
        return Ok(ConstraintOutcome::NotSatisfied(ConstraintKind::KvCapacity));
    }
    Ok(ConstraintOutcome::Satisfied)
}

#[test]
fn criterion_3_constraint_check_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let staleness_bound = 0.2;
    let predictor = |tokens: u64| tokens as f64 * 2e-4 + 0.005;
    let mut outcomes = [0usize; 5];
    for case in 0..2000 {
        let slo = SloConfig { slo_ttft: rng.gen_range(0.5..6.0), slo_tpot: 0.1 };
        let now = 100.0;
        let t_switch = rng.gen_range(80.0..100.0);
        let n = rng.gen_range(0..20);
        let requests: Vec<StatusEntry> = (0..n)
            .map(|i| {
                let arrival = rng.gen_range(60.0..100.0);
                let decoding = rng.gen_bool(0.6);
                StatusEntry {
                    id: RequestId(i),
                    arrival_time: arrival,
                    input_len: rng.gen_range(1..4096),
                    first_token_time: decoding.then(|| rng.gen_range(arrival..100.0)),
                    tokens_generated: if decoding { rng.gen_range(0..400) } else { 0 },
                }
            })
            .collect();
        let kv_capacity = rng.gen_range(1u64 << 28..1 << 36);
        let status = InstanceStatus {
            instance: InstanceId(0),
            snapshot_time: now - rng.gen_range(0.0..0.3),
            phase: servesim_core::engine::InstancePhase::Decode,
            t_switch,
            requests,
            kv_used: rng.gen_range(0..kv_capacity),
            kv_capacity,
        };
        let req = RequestInfo {
            id: RequestId(999),
            arrival_time: now,
            input_len: rng.gen_range(1..4096),
        };
        let kv_estimate = req.input_len * 1_597_440 + rng.gen_range(0u64..1 << 30);
        let params = CheckParams { slo, staleness_bound, predictor: &predictor, kv_estimate };
        let got = check_constraints(&status, &req, &params, now);
        let expect = brute_force_check(
            &status, &req, slo, staleness_bound, &predictor, kv_estimate, now,
        );
        let idx = match (&got, &expect) {
            (Err(_), Err(())) => 4,
            (Ok(a), Ok(b)) => {
                assert_eq!(a, b, "case {case} disagreed");
                match a {
                    ConstraintOutcome::Satisfied => 0,
                    ConstraintOutcome::NotSatisfied(ConstraintKind::Ttft) => 1,
                    ConstraintOutcome::NotSatisfied(ConstraintKind::Tpot) => 2,
                    ConstraintOutcome::NotSatisfied(ConstraintKind::KvCapacity) => 3,
                }
            }
            (a, b) => panic!("case {case}: implementation {a:?} vs oracle {b:?}"),
        };
        outcomes[idx] += 1;
    }
    // Every verdict class must actually be exercised for the agreement to
    // mean anything.
    println!("  verdict coverage [sat, ttft, tpot, kv, stale]: {outcomes:?}");
    assert!(outcomes.iter().all(|&c| c > 20), "verdict coverage too thin: {outcomes:?}");
    pass(3, "2000 randomized checks agree exactly with the brute-force oracle");
}

// --- Criterion 4: mitosis replay ---------------------------------------------

#[test]
fn criterion_4_mitosis_walk_replay() {
    let policy = ScalingPolicy { n_lower: 3, n_upper: 6, ..Default::default() };
    let mut macros = vec![MacroView { size: 6, created_seq: 0 }];
    let mut seq = 1;
    let mut multisets = vec![sorted_sizes(&macros)];
    let walk = [ScaleTrigger::Up, ScaleTrigger::Down, ScaleTrigger::Down];
    let mut actions = Vec::new();
    for trigger in walk {
        let action = scale_step(&macros, trigger, &policy);
        actions.push(action);
        apply_to_sizes(&mut macros, action, &policy, &mut seq);
        multisets.push(sorted_sizes(&macros));
    }
    assert_eq!(
        multisets,
        vec![vec![6], vec![4, 3], vec![3, 3], vec![5]],
        "size multiset sequence"
    );
    assert!(matches!(actions[0], ScalingAction::Split { .. }));
    assert!(matches!(actions[1], ScalingAction::RemoveInstance { .. }));
    assert!(matches!(actions[2], ScalingAction::Merge { .. }));
    pass(4, "expansion/contraction walk reproduces {6}->{4,3}->{3,3}->{5}");
}

fn sorted_sizes(macros: &[MacroView]) -> Vec<usize> {
    let mut v: Vec<usize> = macros.iter().map(|m| m.size).collect();
    v.sort_unstable();
    v.reverse();
    v
}

// --- Criterion 5: rolling activation liveness --------------------------------

/// Measured P90 goodput of this PaDG configuration is 16 req/s (see
/// criterion 6); 11.2 req/s is 70% of capacity.
const PADG_CAPACITY_REQ_S: f64 = 16.0;

#[test]
fn criterion_5_rolling_activation_liveness() {
    let rate = 0.7 * PADG_CAPACITY_REQ_S;
    let scenario = llama_sharegpt_scenario(padg_strategy(), 4, rate, 600.0, 5);
    let result = run_scenario(&scenario).unwrap();
    assert!(result.quiescent, "run must drain before the horizon");

    // No admission went through deferred queueing at this load.
    let deferred = result.records.iter().filter(|r| r.was_deferred).count();
    assert_eq!(deferred, 0, "no Deferred admissions expected at 70% capacity");

    // Zero admitted requests violate TTFT.
    let metrics = all_metrics(&result.records, &scenario.slo);
    let ttft_violations = metrics.iter().filter(|m| !m.ttft_ok).count();
    assert_eq!(ttft_violations, 0, "TTFT violations at 70% capacity");

    // Log replay: probes walk cyclically from prev_idx, and prev_idx moves
    // only when a constraint fails.
    let n = 4u32;
    let mut prev = 0u32;
    let mut i = 0;
    let log = &result.routing_log;
    let mut groups = 0;
    while i < log.len() {
        let (time, request) = (log[i].time, log[i].request);
        let mut k = 0u32;
        let mut routed_at = None;
        while i < log.len() && log[i].time == time && log[i].request == request {
            let expect_inst = (prev + k) % n;
            assert_eq!(
                log[i].instance,
                InstanceId(expect_inst),
                "probe {i} out of cyclic order"
            );
            if log[i].routed {
                routed_at = Some(expect_inst);
            } else {
                assert_ne!(log[i].outcome, ProbeOutcome::Satisfied);
            }
            k += 1;
            i += 1;
        }
        if let Some(inst) = routed_at {
            if inst != prev {
                assert!(k > 1, "prev_idx moved without a preceding constraint failure");
            }
            prev = inst;
        }
        groups += 1;
    }
    assert!(groups as usize >= result.records.len());
    pass(5, "zero TTFT violations and prev_idx advances only on constraint failure");
}

// --- Criterion 6: strategy ordering ------------------------------------------

fn goodput_for(template: &Scenario, lo: f64, hi: f64, step: f64) -> Result<f64, MetricsError> {
    let slo = template.slo;
    goodput_search(lo, hi, step, 0.90, &slo, template.seed, |rate, seed| {
        let probe = template.with_rate(rate, seed).expect("synthetic workload");
        run_scenario(&probe).map_err(|e| match e {
            servesim_core::scenario::ScenarioError::Sim(sim) => sim,
            other => panic!("probe setup failed: {other}"),
        })
    })
    .map(|g| g.rate)
}

#[test]
fn criterion_6_strategy_ordering() {
    // ShareGPT, Llama-30B/L20, 10 Gbit/s FuDG link: P90 goodput of PaDG must
    // strictly exceed NoDG-separate and FuDG (best P/D split).
    let (lo, hi, step) = (2.0, 20.0, 2.0);
    let padg = goodput_for(&llama_sharegpt_scenario(padg_strategy(), 4, 1.0, 180.0, 11), lo, hi, step)
        .expect("padg feasible");
    let nodg = goodput_for(
        &llama_sharegpt_scenario(StrategySpec::NodgSeparate, 4, 1.0, 180.0, 11),
        lo,
        hi,
        step,
    )
    .expect("nodg feasible");
    let mut fudg_best: Option<f64> = None;
    for split in 1..4 {
        let strategy = StrategySpec::Fudg {
            prefill_instances: split,
            link_bandwidth: 1.25e9,
            hops: 1,
            transfer_latency: 0.0,
        };
        let template = llama_sharegpt_scenario(strategy, 4, 1.0, 180.0, 11);
        if let Ok(rate) = goodput_for(&template, lo, hi, step) {
            fudg_best = Some(fudg_best.map_or(rate, |b: f64| b.max(rate)));
        }
    }
    let fudg = fudg_best.unwrap_or(0.0);
    println!("  P90 goodput (req/s): padg {padg}, nodg-separate {nodg}, fudg {fudg}");
    assert!(padg > nodg, "PaDG ({padg}) must beat NoDG-separate ({nodg})");
    assert!(padg > fudg, "PaDG ({padg}) must beat FuDG ({fudg})");

    // LongBench with Llama-30B: FuDG cannot reach P90 attainment at any
    // probed rate (KV generation outruns the link at every grid point).
    let p = preset("longbench").unwrap();
    for split in 1..4 {
        let strategy = StrategySpec::Fudg {
            prefill_instances: split,
            link_bandwidth: 1.25e9,
            hops: 1,
            transfer_latency: 0.0,
        };
        let mut template = llama_sharegpt_scenario(strategy, 4, 1.0, 600.0, 13);
        template.name = "longbench-llama30b-l20".into();
        template.slo = p.slo;
        template.workload = WorkloadSource::Synthetic(
            p.workload(RatePlan::Constant(1.0), 600.0, 13).unwrap(),
        );
        template.horizon = 720.0;
        let outcome = goodput_for(&template, 0.5, 4.0, 0.5);
        assert!(
            matches!(outcome, Err(MetricsError::NoFeasibleRate { .. })),
            "fudg split {split} on longbench unexpectedly feasible: {outcome:?}"
        );
    }
    // PaDG sustains LongBench on the same grid, so the gap is the strategy,
    // not the workload.
    let mut padg_lb = llama_sharegpt_scenario(padg_strategy(), 4, 1.0, 600.0, 13);
    padg_lb.name = "longbench-padg".into();
    padg_lb.slo = p.slo;
    padg_lb.workload =
        WorkloadSource::Synthetic(p.workload(RatePlan::Constant(1.0), 600.0, 13).unwrap());
    padg_lb.horizon = 720.0;
    let padg_lb_rate = goodput_for(&padg_lb, 0.5, 4.0, 0.5).expect("padg feasible on longbench");
    println!("  LongBench: padg goodput {padg_lb_rate} req/s, fudg infeasible at every rate");
    pass(6, "PaDG > NoDG-separate and PaDG > FuDG on ShareGPT; FuDG infeasible on LongBench");
}

// --- Criterion 7: scaling recovery --------------------------------------------

#[test]
fn criterion_7_scaling_recovery_and_migration_transparency() {
    // Ramp: +3 req/s every 2 simulated minutes over a PaDG macro that starts
    // with 2 instances and may grow to 4.
    let p = preset("sharegpt").unwrap();
    let ramp = RatePlan::Steps(vec![
        RateStep { start: 0.0, rate: 6.0 },
        RateStep { start: 120.0, rate: 10.0 },
        RateStep { start: 240.0, rate: 14.0 },
    ]);
    let spec = p.workload(ramp, 360.0, 21).unwrap();
    let mut scenario = llama_sharegpt_scenario(padg_strategy(), 2, 1.0, 360.0, 21);
    scenario.workload = WorkloadSource::Synthetic(spec);
    scenario.horizon = 600.0;
    scenario.scaling = Some(ScalingSpec {
        policy: ScalingPolicy {
            n_lower: 2,
            n_upper: 4,
            target_attainment: 0.8,
            ..Default::default()
        },
        max_instances: 4,
        sample_period: 30.0,
    });
    let result = run_scenario(&scenario).unwrap();
    assert!(result.quiescent);

    let adds: Vec<f64> = result
        .scaling_log
        .iter()
        .filter(|e| e.action == "add")
        .map(|e| e.time)
        .collect();
    assert!(!adds.is_empty(), "the ramp must trigger at least one AddInstance");

    let buckets = attainment_timeline(&result.records, &scenario.slo, 30.0, result.makespan);
    let target = 0.8;
    let mut dips = 0;
    for w in buckets.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        if prev.fraction >= target && cur.fraction < target && cur.completed > 0 {
            dips += 1;
            // An AddInstance lands within two buckets of the dip onset...
            let add = adds
                .iter()
                .copied()
                .find(|&t| t >= cur.start - 30.0 && t <= cur.start + 60.0);
            assert!(add.is_some(), "dip at {}s has no AddInstance nearby", cur.start);
            // ...and attainment recovers above target within two buckets of it.
            let add = add.unwrap();
            let recovered = buckets.iter().any(|b| {
                b.start > add && b.start <= add + 60.0 + 30.0 && b.fraction >= target && b.completed > 0
            });
            assert!(recovered, "no recovery within two buckets of the add at {add}s");
        }
    }
    assert!(dips >= 1, "the ramp should produce at least one attainment dip");

    // Migration transparency: a scripted split mid-decode must not perturb
    // any resident request's timeline, and migrated instances accept no
    // routes for migration_overhead = 0.1 s.
    let slo = SloConfig { slo_ttft: 0.025, slo_tpot: 0.1 };
    let trace: Vec<_> = (0..8).map(|i| req(0.001 * i as f64, 512, 600)).collect();
    let cfg = toy_instance_config();
    let policy = ScalingPolicy { n_lower: 2, n_upper: 4, ..Default::default() };
    let run = |scaled: bool| -> SimulationResult {
        let controller = scaled.then(|| {
            MitosisController::new(
                policy.clone(),
                slo,
                cfg.clone(),
                5,
                0.02,
                TriggerSource::Scripted(VecDeque::from(vec![(0.05, ScaleTrigger::Up)])),
            )
        });
        let scheduler = PadgScheduler::new(
            PadgConfig { slo, status_period: 0.005, staleness_factor: 4.0, reservation_tokens: 0 },
            vec![(0..4).map(InstanceId).collect()],
            controller,
        );
        Simulation::new(vec![cfg.clone(); 4], &trace, Box::new(scheduler), 1e4, 4096, true)
            .run()
            .unwrap()
    };
    let baseline = run(false);
    let scaled = run(true);
    assert_eq!(scaled.scaling_log[0].action, "split");
    assert_eq!(baseline.records, scaled.records, "migration perturbed request timelines");
    let split_time = scaled.scaling_log[0].time;
    for probe in &scaled.routing_log {
        if probe.routed && probe.instance.0 >= 3 {
            assert!(
                probe.time < split_time || probe.time >= split_time + 0.1 - 1e-9,
                "migrated instance routed during the 0.1 s overhead window"
            );
        }
    }
    pass(7, "dips recover within two buckets of AddInstance; migration is transparent");
}

// --- Criterion 8: determinism -------------------------------------------------

#[test]
fn criterion_8_determinism_byte_identical_csvs() {
    for strategy in [
        padg_strategy(),
        StrategySpec::NodgSeparate,
        StrategySpec::Fudg {
            prefill_instances: 2,
            link_bandwidth: 1.25e9,
            hops: 2,
            transfer_latency: 0.001,
        },
    ] {
        let scenario = llama_sharegpt_scenario(strategy, 4, 8.0, 60.0, 97);
        let a = run_scenario(&scenario).unwrap();
        let b = run_scenario(&scenario).unwrap();
        assert_eq!(
            report::per_request_csv(&a, &scenario.slo),
            report::per_request_csv(&b, &scenario.slo)
        );
        assert_eq!(
            report::summary_csv(&scenario.name, 8.0, &a, &scenario.slo),
            report::summary_csv(&scenario.name, 8.0, &b, &scenario.slo)
        );
        assert_eq!(report::routing_csv(&a.routing_log), report::routing_csv(&b.routing_log));
        assert_eq!(report::utilization_csv(&a), report::utilization_csv(&b));
    }
    pass(8, "identical (scenario, seed) pairs produce byte-identical CSVs");
}

// --- Criterion 9: conservation suite -------------------------------------------

#[test]
fn criterion_9_conservation_on_randomized_scenarios() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut fudg_runs = 0;
    for case in 0..100 {
        let instances = rng.gen_range(1..=4usize);
        let strategy = match rng.gen_range(0..4) {
            0 => padg_spec(),
            1 => StrategySpec::NodgSeparate,
            2 => StrategySpec::NodgHybrid {
                chunk_size: rng.gen_range(32..=512),
                token_budget: 1024,
            },
            _ if instances >= 2 => {
                fudg_runs += 1;
                StrategySpec::Fudg {
                    prefill_instances: rng.gen_range(1..instances),
                    link_bandwidth: 10f64.powf(rng.gen_range(7.0..10.0)),
                    hops: if rng.gen_bool(0.5) { 1 } else { 2 },
                    transfer_latency: rng.gen_range(0.0..0.01),
                }
            }
            _ => StrategySpec::NodgSeparate,
        };
        let n_reqs = rng.gen_range(5..40);
        let mut t = 0.0;
        let trace: Vec<_> = (0..n_reqs)
            .map(|_| {
                t += rng.gen_range(0.0..0.2);
                req(t, rng.gen_range(1..512), rng.gen_range(1..64))
            })
            .collect();
        // Audit mode re-derives per-instance KV from request residence at
        // every event boundary and fails the run on any mismatch.
        let mut scenario = trace_scenario(instances, strategy, trace);
        scenario.seed = case;
        scenario.audit = true;
        let result = run_scenario(&scenario)
            .unwrap_or_else(|e| panic!("case {case}: conservation audit failed: {e}"));
        assert!(result.quiescent, "case {case} did not drain");
        assert!(result.records.iter().all(|r| r.kv_residence.is_none()));
        if matches!(scenario.strategy, StrategySpec::Fudg { .. }) {
            let expect: u64 = result
                .records
                .iter()
                .map(|r| r.input_len * scenario.cluster.profile.model.kv_bytes_per_token())
                .sum();
            assert_eq!(
                result.transfer_payload_bytes, expect,
                "case {case}: transferred KV bytes not conserved"
            );
        }
    }
    assert!(fudg_runs >= 10, "need a meaningful number of FuDG scenarios, got {fudg_runs}");
    pass(9, "KV and transfer-byte conservation held on 100 randomized scenarios");
}
