#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use gensim::api::{self, AppState};

pub struct Server {
    pub base: String,
    pub agent: ureq::Agent,
}

fn spawn(app: Router) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

/// An API server on an ephemeral port, writing under `data_dir`.
pub fn start(data_dir: &Path) -> Server {
    let state = Arc::new(AppState::new(data_dir.to_path_buf()));
    let addr = spawn(api::router(state));
    Server {
        base: format!("http://{addr}"),
        agent: ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into(),
    }
}

/// A training service stub answering `POST /finetune` with a job id.
pub fn training_stub() -> String {
    let app = Router::new().route(
        "/finetune",
        post(|Json(body): Json<Value>| async move {
            Json(json!({
                "job_id": format!("job-{}-{}", body["method"].as_str().unwrap_or("?"), body["dataset_path"].as_str().unwrap_or("?").len())
            }))
        }),
    );
    format!("http://{}", spawn(app))
}

impl Server {
    pub fn get(&self, path: &str) -> (u16, Value) {
        let mut resp = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap_or(Value::Null))
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        self.post_keyed(path, body, None).0
    }

    /// POST with an optional idempotency key; also reports whether the
    /// response was a replay.
    pub fn post_keyed(&self, path: &str, body: Value, key: Option<&str>) -> ((u16, Value), bool) {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(k) = key {
            req = req.header("Idempotency-Key", k);
        }
        let mut resp = if body.is_null() {
            req.send_empty().unwrap()
        } else {
            req.send_json(&body).unwrap()
        };
        let replayed = resp.headers().contains_key(api::REPLAYED_HEADER);
        let status = resp.status().as_u16();
        ((status, resp.body_mut().read_json().unwrap_or(Value::Null)), replayed)
    }

    pub fn create(&self, config: Value) -> String {
        let (status, body) = self.post("/simulations", config);
        assert_eq!(status, 201, "{body}");
        body["id"].as_str().unwrap().to_owned()
    }

    pub fn wait_status(&self, id: &str, want: &str, within: Duration) -> Value {
        let start = Instant::now();
        loop {
            let (_, h) = self.get(&format!("/simulations/{id}"));
            if h["status"] == want {
                return h;
            }
            assert!(start.elapsed() < within, "still {h} after {within:?}");
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Read up to `max` events from the SSE feed (all of them if `None`),
    /// resuming after `last_id`. Returns the events and whether the server
    /// closed the stream.
    pub fn read_events(&self, id: &str, last_id: Option<u64>, max: Option<usize>) -> (Vec<Value>, bool) {
        let mut req = self
            .agent
            .get(format!("{}/simulations/{id}/events", self.base));
        if let Some(l) = last_id {
            req = req.header("Last-Event-ID", l.to_string());
        }
        let resp = req.call().unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        let reader = resp.into_body().into_reader();
        read_sse(reader, max)
    }
}

pub fn read_sse(reader: impl Read, max: Option<usize>) -> (Vec<Value>, bool) {
    let mut out = Vec::new();
    let mut id: Option<u64> = None;
    let mut lines = BufReader::new(reader).lines();
    loop {
        if max.is_some_and(|m| out.len() >= m) {
            return (out, false);
        }
        let Some(line) = lines.next() else {
            return (out, true);
        };
        let Ok(line) = line else {
            return (out, true);
        };
        if let Some(v) = line.strip_prefix("id:") {
            id = v.trim().parse().ok();
        } else if let Some(data) = line.strip_prefix("data:") {
            let ev: Value = serde_json::from_str(data.trim()).unwrap();
            assert_eq!(Some(ev["seq"].as_u64().unwrap()), id, "SSE id must equal seq");
            out.push(ev);
        }
    }
}

pub fn mock_config(n: usize, rounds: u64, latency_ms: u64) -> Value {
    json!({
        "scenario": "recommender",
        "num_agents": n,
        "rounds": rounds,
        "seed": 11,
        "workers": 4,
        "backend": {"kind": "mock_deterministic", "seed": 3, "latency": {"type": "constant", "ms": latency_ms}}
    })
}
