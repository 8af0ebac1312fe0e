use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gensim(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_gensim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "gensim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

#[test]
fn run_interview_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.json");
    write(
        &config,
        &json!({
            "scenario": "job_market",
            "num_agents": 6,
            "rounds": 3,
            "seed": 5,
            "backend": {"kind": "mock_deterministic", "seed": 1}
        }),
    );
    let out = dir.path().join("out");
    let stdout = gensim(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("round")).count(), 3);

    let log = std::fs::read_to_string(out.join("events.jsonl")).unwrap();
    let seqs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["seq"].as_u64().unwrap())
        .collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());

    let ckpt = out.join("checkpoint.jsonl");
    let ex = gensim(&[
        "interview",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--id",
        "2",
        "--question",
        "Did you find work?",
    ]);
    let ex: Value = serde_json::from_slice(&ex.stdout).unwrap();
    assert_eq!(ex["agent_id"], 2);
    assert_eq!(ex["round"], 3);

    let found = gensim(&["search", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(String::from_utf8(found.stdout).unwrap().lines().count(), 6);

    // Resuming a finished run adds nothing.
    gensim(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read_to_string(out.join("events.jsonl")).unwrap(), log);
}

#[test]
fn export_from_feedback_file() {
    let dir = tempfile::tempdir().unwrap();
    let feedback = dir.path().join("feedback.jsonl");
    let lines = [
        json!({"event_seq": 2, "q": "option:4 Nurse", "a": "apply: 9", "s": 0.0, "source": "judge"}),
        json!({"event_seq": 2, "q": "option:4 Nurse", "a_prime": "apply: 4", "source": "human"}),
        json!({"event_seq": 1, "q": "option:1 Chef", "a_prime": "apply: 1", "source": "judge"}),
    ];
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(&feedback, body).unwrap();

    let sft = dir.path().join("sft.jsonl");
    gensim(&["export", "--kind", "sft", "--feedback", feedback.to_str().unwrap(), "--out", sft.to_str().unwrap()]);
    let rows: Vec<Value> = std::fs::read_to_string(&sft)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], json!({"prompt": "option:1 Chef", "completion": "apply: 1"}));

    let reward = dir.path().join("reward.jsonl");
    gensim(&["export", "--kind", "reward", "--feedback", feedback.to_str().unwrap(), "--out", reward.to_str().unwrap()]);
    let row: Value = serde_json::from_str(std::fs::read_to_string(&reward).unwrap().trim()).unwrap();
    assert_eq!(row["score"], 0.0);
    assert_eq!(row["source"], "judge");
}

#[test]
fn bench_scaling_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scaling.json");
    write(
        &config,
        &json!({"agent_counts": [8], "concurrency_levels": [4, 8], "latency_ms": 5}),
    );
    gensim(&["bench", "scaling", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let csv = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("agents,concurrency,wall_time_ms"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn bad_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    write(&config, &json!({"scenario": "job_market", "num_agents": 0, "rounds": 1, "seed": 1, "backend": {"kind": "mock_deterministic", "seed": 1}}));
    let out = Command::new(env!("CARGO_BIN_EXE_gensim"))
        .args(["run", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_agents"));
}
