//! Acceptance gate: one `[PASS]`/`[FAIL]` line per criterion, with the
//! measured values. Exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use gensim_core::correction::{
    export_reward_dataset, export_sft_dataset, read_reward_dataset, read_sft_dataset,
    replay_with_feedback, run_with_feedback, trigger_external_finetune, CorrectionLoop,
    FeedbackSource, FinetuneMethod, Judge, JudgeMode, NoisyJobBackend, OracleJudge, OracleReviser,
    RevisionFeedback, ScoreFeedback,
};
use gensim_core::experiments::{fluctuation, run_fluctuation_experiment, run_scaling_benchmark, RatingDistribution};
use gensim_core::gateway::{BackendKind, ChatBackend, LatencyModel};
use gensim_core::scheduler::{run, to_jsonl, ActionEvent, Simulation};
use gensim_core::{AgentId, SimulationConfig};

type Verdict = Result<String, String>;

fn criterion(name: &str, budget: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = start.elapsed();
    let (pass, detail) = match verdict {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
        Err(d) => (false, d),
    };
    println!(
        "[{}] {name}: {detail} ({:.1} s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fluctuation_law() -> Verdict {
    let sizes = [300, 3_000, 30_000];
    let mut sums = [0.0; 3];
    for seed in 0..5u64 {
        let backend = BackendKind::MockStochastic {
            seed: 1000 + seed,
            rating_weights: vec![0.1; 10],
            latency: LatencyModel::default(),
        };
        let res = run_fluctuation_experiment(&sizes, 10, &backend, seed).map_err(|e| e.to_string())?;
        for (s, r) in sums.iter_mut().zip(&res) {
            *s += r.v_sum;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / 5.0).collect();
    let ratios = [means[1] / means[0], means[2] / means[1]];
    let detail = format!(
        "mean v_sum {:.5} / {:.5} / {:.5}, ratios {:.3} {:.3}",
        means[0], means[1], means[2], ratios[0], ratios[1]
    );
    ensure(means[0] > means[1] && means[1] > means[2], || format!("not decreasing: {detail}"))?;
    ensure(ratios.iter().all(|r| (0.2..=0.5).contains(r)), || format!("ratio out of [0.2, 0.5]: {detail}"))?;
    Ok(detail)
}

/// σ from all pairwise squared differences, without forming a mean.
fn pairwise_sigma(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let acc: f64 = xs.iter().flat_map(|a| xs.iter().map(move |b| (a - b).powi(2))).sum();
    (acc / (2.0 * n * n)).sqrt()
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let runs = rng.random_range(2..=20);
        let dists: Vec<RatingDistribution> = (0..runs)
            .map(|_| {
                let counts: [u64; 10] = std::array::from_fn(|_| rng.random_range(0..500));
                let mut counts = counts;
                counts[rng.random_range(0..10)] += 1;
                RatingDistribution::from_counts(&counts).unwrap()
            })
            .collect();
        let got = fluctuation(&dists).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for r in 0..10 {
            let xs: Vec<f64> = dists.iter().map(|d| d.p[r]).collect();
            let o = pairwise_sigma(&xs);
            total += o;
            worst = worst.max((got.per_rating_v[r] - o).abs());
        }
        worst = worst.max((got.v_sum - total).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 inputs, max deviation {worst:.2e}"))
}

fn scaling_shape() -> Verdict {
    const L: f64 = 50.0;
    let latency = LatencyModel::constant(Duration::from_millis(50));
    let mut rows = run_scaling_benchmark(&[100, 200, 400], &[8], latency.clone(), 7).map_err(|e| e.to_string())?;
    let by_c = run_scaling_benchmark(&[400], &[2, 4], latency, 7).map_err(|e| e.to_string())?;
    rows.extend(by_c);
    let mut parts = Vec::new();
    for r in &rows {
        let model = (r.agents as f64 / r.concurrency as f64).ceil() * L;
        let ratio = r.wall_time_ms / model;
        parts.push(format!("N={} C={} x{ratio:.3}", r.agents, r.concurrency));
        ensure((1.0..=1.25).contains(&ratio), || {
            format!("N={} C={}: {:.1} ms vs model {model} ms", r.agents, r.concurrency, r.wall_time_ms)
        })?;
    }
    let t = |c: usize| rows.iter().find(|r| r.agents == 400 && r.concurrency == c).unwrap().wall_time_ms;
    ensure(t(2) > t(4) && t(4) > t(8), || "wall time does not fall with concurrency".into())?;
    Ok(parts.join(", "))
}

/// Resets the peak-RSS counter so the reading covers only what follows.
fn reset_peak_rss() -> bool {
    std::fs::write("/proc/self/clear_refs", "5").is_ok()
}

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn scale_target() -> Verdict {
    let reset = reset_peak_rss();
    let mut config = SimulationConfig::new(
        "recommender",
        100_000,
        1,
        42,
        BackendKind::MockDeterministic {
            seed: 42,
            latency: LatencyModel::default(),
        },
    );
    config.workers = std::thread::available_parallelism().map_or(8, |n| n.get());
    let start = Instant::now();
    let mut sim = Simulation::new(config).map_err(|e| e.to_string())?;
    let spawned = start.elapsed();
    let out = sim.run_round().map_err(|e| e.to_string())?;
    let total = start.elapsed();
    let peak = peak_rss_bytes().ok_or("cannot read VmHWM")?;
    let gb = peak as f64 / (1u64 << 30) as f64;
    let detail = format!(
        "spawn {:.1} s, round {:.1} s, {} events, {} errors, peak RSS {gb:.2} GiB{}",
        spawned.as_secs_f64(),
        (total - spawned).as_secs_f64(),
        out.events.len(),
        out.report.errors,
        if reset { "" } else { " (process peak; reset unavailable)" }
    );
    ensure(out.events.len() == 100_000 && out.report.errors == 0, || detail.clone())?;
    ensure(total < Duration::from_secs(120), || format!("too slow: {detail}"))?;
    ensure(gb < 8.0, || format!("too much memory: {detail}"))?;
    ensure(sim.agents().len() == 100_000 && sim.agent(AgentId(100_000)).is_some(), || "ids".into())?;
    Ok(detail)
}

fn det_config(scenario: &str, workers: usize) -> SimulationConfig {
    let mut c = SimulationConfig::new(
        scenario,
        60,
        6,
        2024,
        BackendKind::MockDeterministic {
            seed: 9,
            latency: LatencyModel::default(),
        },
    );
    c.workers = workers;
    c.memory.reflection_threshold = 1.0;
    if scenario == "group_discussion" {
        c.scenario_params = json!({"group_size": 5, "max_turns": 4});
    }
    c
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = 0;
    for scenario in ["job_market", "recommender", "group_discussion"] {
        let reference = to_jsonl(&run(det_config(scenario, 1)).map_err(|e| e.to_string())?.events);
        for w in [4, 16] {
            let other = to_jsonl(&run(det_config(scenario, w)).map_err(|e| e.to_string())?.events);
            ensure(other == reference, || format!("{scenario}: workers={w} log differs"))?;
        }
        // Three rounds, checkpoint to disk, restore, three more.
        let mut sim = Simulation::new(det_config(scenario, 4)).map_err(|e| e.to_string())?;
        let mut events: Vec<ActionEvent> = Vec::new();
        for _ in 0..3 {
            events.extend(sim.run_round().map_err(|e| e.to_string())?.events);
        }
        let path = dir.path().join(format!("{scenario}.ckpt"));
        sim.checkpoint(&path).map_err(|e| e.to_string())?;
        drop(sim);
        let mut sim = Simulation::restore(&path).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            events.extend(sim.run_round().map_err(|e| e.to_string())?.events);
        }
        ensure(to_jsonl(&events) == reference, || format!("{scenario}: restored log differs"))?;
        bytes += reference.len();
    }
    Ok(format!(
        "3 scenarios x workers 1/4/16 and midpoint restore identical ({} KiB of log)",
        bytes / 1024
    ))
}

fn correction_cycle() -> CorrectionLoop {
    CorrectionLoop::new(
        Judge::new(Arc::new(OracleJudge::job_market()), JudgeMode::Score),
        Judge::new(Arc::new(OracleReviser), JudgeMode::Revise),
    )
    .unwrap()
}

fn job_market_sim(seed: u64) -> Simulation {
    let mut c = SimulationConfig::new(
        "job_market",
        1000,
        10,
        seed,
        BackendKind::MockDeterministic {
            seed,
            latency: LatencyModel::default(),
        },
    );
    c.workers = 16;
    Simulation::new(c).unwrap()
}

fn noisy() -> Arc<dyn ChatBackend> {
    Arc::new(NoisyJobBackend::new(77, 0.5))
}

fn correction_single_round() -> Verdict {
    let cycle = correction_cycle();
    let mut sim = job_market_sim(5);
    let imp = replay_with_feedback(&mut sim, noisy(), &cycle).map_err(|e| e.to_string())?;
    let detail = format!(
        "baseline {:.2}, adapted {:.2}, delta {:.2} over {} events",
        imp.before.mean,
        imp.after.mean,
        imp.delta(),
        imp.after.judged
    );
    ensure(imp.delta() >= 3.0, || detail.clone())?;
    Ok(detail)
}

fn correction_multi_round() -> Verdict {
    let cycle = correction_cycle();
    let mut sim = job_market_sim(6);
    let adapted: Vec<f64> = run_with_feedback(&mut sim, noisy(), &cycle, 5, true)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|s| s.mean)
        .collect();
    let plain_cycle = correction_cycle();
    let mut sim = job_market_sim(6);
    let plain: Vec<f64> = run_with_feedback(&mut sim, noisy(), &plain_cycle, 5, false)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|s| s.mean)
        .collect();
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    let gain = adapted[4] - adapted[0];
    let drift = plain[4] - plain[0];
    let detail = format!("adapted [{}] gain {gain:.2}; baseline [{}] drift {drift:.2}", fmt(&adapted), fmt(&plain));
    ensure(adapted.windows(2).all(|w| w[1] >= w[0]), || format!("not non-decreasing: {detail}"))?;
    ensure(gain >= 2.0, || format!("gain too small: {detail}"))?;
    ensure(drift.abs() < 0.5, || format!("baseline moves: {detail}"))?;
    Ok(detail)
}

fn sft_schema() -> Value {
    json!({
        "type": "object",
        "properties": {"prompt": {"type": "string", "minLength": 1}, "completion": {"type": "string", "minLength": 1}},
        "required": ["prompt", "completion"],
        "additionalProperties": false
    })
}

fn reward_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "prompt": {"type": "string", "minLength": 1},
            "completion": {"type": "string"},
            "score": {"type": "number", "minimum": 0, "maximum": 10},
            "source": {"enum": ["judge", "human"]}
        },
        "required": ["prompt", "completion", "score", "source"],
        "additionalProperties": false
    })
}

fn validate_lines(path: &Path, schema: &Value) -> Result<usize, String> {
    let validator = jsonschema::validator_for(schema).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    for (i, line) in text.lines().enumerate() {
        let v: Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        validator
            .validate(&v)
            .map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
    }
    Ok(text.lines().count())
}

fn dataset_formats() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let events: Vec<ActionEvent> = (1..=40)
        .map(|seq| ActionEvent {
            seq,
            round: seq / 10,
            agent_id: AgentId(seq),
            q: format!("name: agent {seq}\n\"quoted\" \\ line\noption:{seq} Nurse\nünïcode ✓"),
            a: format!("apply: {}", seq + 1000),
            parsed: json!({}),
            latency_ms: 0.0,
            error: None,
        })
        .collect();
    let revisions: Vec<RevisionFeedback> = events
        .iter()
        .map(|e| RevisionFeedback::new(e, format!("apply: {}", e.seq), FeedbackSource::Judge).unwrap())
        .collect();
    let scores: Vec<ScoreFeedback> = events
        .iter()
        .map(|e| ScoreFeedback::new(e, (e.seq % 11) as f64 * 0.9, FeedbackSource::Human).unwrap())
        .collect();

    let sft = dir.path().join("sft.jsonl");
    let reward = dir.path().join("reward.jsonl");
    export_sft_dataset(&revisions, &sft).map_err(|e| e.to_string())?;
    export_reward_dataset(&scores, &reward).map_err(|e| e.to_string())?;
    let n_sft = validate_lines(&sft, &sft_schema())?;
    let n_reward = validate_lines(&reward, &reward_schema())?;

    let back = read_sft_dataset(&sft).map_err(|e| e.to_string())?;
    for (r, f) in back.iter().zip(&revisions) {
        ensure(r.prompt == f.q && r.completion == f.a_prime, || format!("sft row {} changed", f.event_seq))?;
    }
    let back = read_reward_dataset(&reward).map_err(|e| e.to_string())?;
    for (r, f) in back.iter().zip(&scores) {
        ensure(
            r.prompt == f.q && r.completion == f.a && r.score == f.s && r.source == f.source,
            || format!("reward row {} changed", f.event_seq),
        )?;
    }
    ensure(n_sft == 40 && n_reward == 40, || "row counts".into())?;

    let stub = common::training_stub();
    let job = trigger_external_finetune(&sft, &stub, FinetuneMethod::Sft).map_err(|e| e.to_string())?;
    let expect = format!("job-sft-{}", sft.to_string_lossy().len());
    ensure(job == expect, || format!("job id {job}, expected {expect}"))?;
    Ok(format!("{n_sft} sft + {n_reward} reward rows valid and lossless; job id {job}"))
}

fn api_contract() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = common::start(dir.path());
    let wait = Duration::from_secs(60);

    // Transitions: each observed status must follow a legal edge.
    let legal = |a: &str, b: &str| {
        a == b
            || matches!(
                (a, b),
                ("configured", "running")
                    | ("running", "paused")
                    | ("paused", "running")
                    | ("running", "stopped")
                    | ("running", "finished")
            )
    };
    let id = s.create(common::mock_config(8, 60, 5));
    let mut seen = vec!["configured".to_owned()];
    let mut observe = |h: &Value| {
        let st = h["status"].as_str().unwrap().to_owned();
        if seen.last() != Some(&st) {
            seen.push(st);
        }
    };
    let (code, h) = s.post(&format!("/simulations/{id}/run"), json!({"rounds": 10}));
    ensure(code == 202, || format!("run: {code} {h}"))?;
    observe(&h);
    observe(&s.wait_status(&id, "paused", wait));
    let (_, h) = s.post(&format!("/simulations/{id}/run"), Value::Null);
    observe(&h);
    std::thread::sleep(Duration::from_millis(50));
    let (code, h) = s.post(&format!("/simulations/{id}/stop"), Value::Null);
    ensure(code == 200 && h["status"] == "stopped", || format!("stop: {code} {h}"))?;
    observe(&h);
    let (code, _) = s.post(&format!("/simulations/{id}/run"), Value::Null);
    ensure(code == 409, || format!("run after stop gave {code}"))?;
    ensure(seen.windows(2).all(|w| legal(&w[0], &w[1])), || format!("illegal path {seen:?}"))?;
    ensure(seen == ["configured", "running", "paused", "running", "stopped"], || format!("path {seen:?}"))?;
    let stopped_at = h["current_round"].as_u64().unwrap();

    // SSE contiguity across forced reconnects, on a live run.
    let live = s.create(common::mock_config(7, 40, 3));
    s.post(&format!("/simulations/{live}/run"), Value::Null);
    let mut seqs: Vec<u64> = Vec::new();
    let mut reconnects = 0;
    loop {
        let (batch, closed) = s.read_events(&live, seqs.last().copied(), Some(23));
        seqs.extend(batch.iter().map(|e| e["seq"].as_u64().unwrap()));
        if closed {
            break;
        }
        reconnects += 1;
    }
    ensure(seqs == (1..=280).collect::<Vec<_>>(), || {
        format!("seq gap or duplicate over {} events", seqs.len())
    })?;
    let (stopped_log, _) = s.read_events(&id, None, None);
    ensure(stopped_log.len() as u64 == stopped_at * 8, || "stopped log not at a round boundary".into())?;

    // Idempotent retries: one effect, same response.
    let ((c1, b1), _) = s.post_keyed("/feedback/score", json!({"simulation_id": live, "event_seq": 3, "s": 7}), Some("k1"));
    let ((c2, b2), replayed) =
        s.post_keyed("/feedback/score", json!({"simulation_id": live, "event_seq": 3, "s": 7}), Some("k1"));
    ensure(c1 == 201 && c2 == 201 && b1 == b2 && replayed, || "score retry differs".into())?;
    let ((c1, b1), _) = s.post_keyed("/simulations", common::mock_config(2, 1, 0), Some("k2"));
    let ((_, b2), _) = s.post_keyed("/simulations", common::mock_config(2, 1, 0), Some("k2"));
    ensure(c1 == 201 && b1["id"] == b2["id"], || "create retry made a second simulation".into())?;
    let (_, fb) = s.get("/feedback");
    let (_, sims) = s.get("/simulations");
    ensure(fb["scores"].as_array().unwrap().len() == 1, || "duplicate score stored".into())?;
    ensure(sims.as_array().unwrap().len() == 3, || "duplicate simulation created".into())?;

    Ok(format!(
        "path {}; 280 events over {reconnects} reconnects contiguous; keyed retries single-effect",
        seen.join(">")
    ))
}

fn main() {
    // Peak memory is sampled for the 100k run, so it goes first.
    let results = [
        criterion("scale_100k_agents", Duration::from_secs(120), scale_target),
        criterion("fluctuation_law", Duration::from_secs(120), fluctuation_law),
        criterion("fluctuation_oracle_equivalence", Duration::from_secs(5), oracle_equivalence),
        criterion("scaling_shape", Duration::from_secs(120), scaling_shape),
        criterion("determinism", Duration::from_secs(60), determinism),
        criterion("correction_single_round", Duration::from_secs(60), correction_single_round),
        criterion("correction_multi_round", Duration::from_secs(180), correction_multi_round),
        criterion("dataset_formats", Duration::from_secs(60), dataset_formats),
        criterion("api_contract", Duration::from_secs(120), api_contract),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
