//! In-process backends for tests and experiments.
//!
//! The reply-generating mocks understand three line-start markers that the
//! scenarios put in their prompts:
//!
//! * `option:<id>`: pick one and answer `apply: <id>`;
//! * `item:<id>`: answer one `<id>=<rating>` line per item;
//! * `role:<Name>`: write a dialogue as `<Name>: <text>` lines.
//!
//! All randomness is counter-based: a draw is a pure function of the mock
//! seed, the request hash and a draw index, so parallel dispatch cannot
//! perturb results.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use parking_lot::Mutex;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{validate_rating_weights, ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::text::{derive_key, estimate_tokens, keyed_unit};

/// The rating scale 0.5, 1.0, ..., 5.0.
pub const RATING_GRID: [f64; 10] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0];

pub fn format_rating(r: f64) -> String {
    format!("{r:.1}")
}

fn markers(prompt: &str, re: &Regex) -> Vec<String> {
    re.captures_iter(prompt).map(|c| c[1].trim().to_owned()).collect()
}

fn item_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*item:(\d+)").unwrap())
}

fn option_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*option:(\d+)").unwrap())
}

fn role_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*role:([^\n]+)$").unwrap())
}

fn name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^name: ([^\n]+)$").unwrap())
}

/// Simulated call latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LatencyModel {
    Constant { ms: u64 },
    /// `median_ms * exp(sigma * z)` with `z` standard normal.
    LogNormal { median_ms: f64, sigma: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Constant { ms: 0 }
    }
}

impl LatencyModel {
    pub fn constant(d: Duration) -> Self {
        LatencyModel::Constant {
            ms: d.as_millis() as u64,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self {
            LatencyModel::Constant { .. } => Ok(()),
            LatencyModel::LogNormal { median_ms, sigma } => {
                if median_ms.is_finite() && *median_ms >= 0.0 && sigma.is_finite() && *sigma >= 0.0
                {
                    Ok(())
                } else {
                    Err(GatewayError::Invalid(
                        "lognormal latency needs median_ms >= 0 and sigma >= 0".into(),
                    ))
                }
            }
        }
    }

    pub fn sample(&self, key: u64) -> Duration {
        match self {
            LatencyModel::Constant { ms } => Duration::from_millis(*ms),
            LatencyModel::LogNormal { median_ms, sigma } => {
                // Box-Muller from two keyed uniforms.
                let u1 = keyed_unit(&[key, 1]).max(f64::MIN_POSITIVE);
                let u2 = keyed_unit(&[key, 2]);
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                Duration::from_secs_f64(median_ms * (sigma * z).exp() / 1000.0)
            }
        }
    }
}

fn respond(id: &str, content: String, latency: Duration) -> ChatResponse {
    if !latency.is_zero() {
        std::thread::sleep(latency);
    }
    ChatResponse {
        token_estimate: estimate_tokens(&content),
        content,
        latency,
        backend_id: id.to_owned(),
    }
}

const PHRASES: [&str; 6] = [
    "I think we should look at this from a practical angle.",
    "That matches what I have seen in my own life.",
    "I am not fully convinced, but I see the point.",
    "Let us agree on something concrete before moving on.",
    "My experience suggests a more careful approach.",
    "I would like to hear what the others think first.",
];

const DEFAULT_TEMPLATES: [&str; 3] = [
    "I am {name}.\n{reply}",
    "{name} here.\n{reply}",
    "Speaking as {name}.\n{reply}",
];

/// Replies are a pure function of (messages, seed): a stable hash picks a
/// template and fills `{name}`, `{reply}` and `{hash}`.
#[derive(Debug, Clone)]
pub struct DeterministicMock {
    id: String,
    seed: u64,
    latency: LatencyModel,
    templates: Vec<String>,
}

impl DeterministicMock {
    pub fn new(seed: u64) -> Self {
        DeterministicMock {
            id: "mock-deterministic".into(),
            seed,
            latency: LatencyModel::default(),
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_templates(mut self, templates: Vec<String>) -> Self {
        assert!(!templates.is_empty(), "at least one template");
        self.templates = templates;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    fn reply(&self, prompt: &str, key: u64) -> String {
        let roles = markers(prompt, role_re());
        if !roles.is_empty() {
            let mut lines = Vec::new();
            for i in 0..roles.len() * 2 {
                let phrase = PHRASES[(derive_key(&[key, i as u64]) % PHRASES.len() as u64) as usize];
                lines.push(format!("{}: {}", roles[i % roles.len()], phrase));
            }
            return lines.join("\n");
        }
        let items = markers(prompt, item_re());
        if !items.is_empty() {
            return items
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let r = RATING_GRID[(derive_key(&[key, i as u64]) % 10) as usize];
                    format!("{id}={}", format_rating(r))
                })
                .collect::<Vec<_>>()
                .join("\n");
        }
        let options = markers(prompt, option_re());
        if !options.is_empty() {
            let pick = &options[(derive_key(&[key, 0]) % options.len() as u64) as usize];
            return format!("apply: {pick}");
        }
        PHRASES[(key % PHRASES.len() as u64) as usize].to_owned()
    }
}

impl ChatBackend for DeterministicMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let key = derive_key(&[self.seed, request.stable_hash()]);
        let prompt = request.prompt_text();
        let name = name_re()
            .captures(&prompt)
            .map(|c| c[1].trim().to_owned())
            .unwrap_or_else(|| "someone".to_owned());
        let template = &self.templates[(key % self.templates.len() as u64) as usize];
        let content = template
            .replace("{name}", &name)
            .replace("{hash}", &format!("{:016x}", key))
            .replace("{reply}", &self.reply(&prompt, key));
        Ok(respond(&self.id, content, self.latency.sample(key)))
    }
}

/// Draws ratings from a fixed distribution over [`RATING_GRID`].
///
/// Prompts listing `item:<id>` lines get one `<id>=<rating>` line per item
/// (draw index = item position); any other prompt gets a bare rating.
#[derive(Debug, Clone)]
pub struct StochasticMock {
    id: String,
    seed: u64,
    cumulative: [f64; 10],
    latency: LatencyModel,
}

impl StochasticMock {
    pub fn new(seed: u64, weights: &[f64], latency: LatencyModel) -> Result<Self, GatewayError> {
        validate_rating_weights(weights)?;
        let mut cumulative = [0.0; 10];
        let mut acc = 0.0;
        for (c, w) in cumulative.iter_mut().zip(weights) {
            acc += w;
            *c = acc;
        }
        Ok(StochasticMock {
            id: "mock-stochastic".into(),
            seed,
            cumulative,
            latency,
        })
    }

    pub fn uniform(seed: u64) -> Self {
        Self::new(seed, &[0.1; 10], LatencyModel::default()).expect("uniform weights are valid")
    }

    /// Rating for draw `index` of the request with hash `request_hash`.
    pub fn draw(&self, request_hash: u64, index: u64) -> f64 {
        let u = keyed_unit(&[self.seed, request_hash, index]);
        // Zero-weight ratings are never selected: first bin whose cumulative
        // mass exceeds u.
        let pos = self
            .cumulative
            .iter()
            .position(|c| u < *c)
            .unwrap_or_else(|| self.cumulative.iter().rposition(|c| *c > 0.0).unwrap_or(9));
        RATING_GRID[pos]
    }
}

impl ChatBackend for StochasticMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let hash = request.stable_hash();
        let prompt = request.prompt_text();
        let items = markers(&prompt, item_re());
        let content = if items.is_empty() {
            format_rating(self.draw(hash, 0))
        } else {
            items
                .iter()
                .enumerate()
                .map(|(i, id)| format!("{id}={}", format_rating(self.draw(hash, i as u64))))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let latency = self.latency.sample(derive_key(&[self.seed, hash, u64::MAX]));
        Ok(respond(&self.id, content, latency))
    }
}

/// Replays a fixed script of results in call order, then either repeats a
/// fallback reply or fails. Records every request it sees.
pub struct ScriptedBackend {
    id: String,
    script: Mutex<VecDeque<Result<String, GatewayError>>>,
    fallback: Option<String>,
    calls: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(script: Vec<Result<String, GatewayError>>) -> Self {
        ScriptedBackend {
            id: "scripted".into(),
            script: Mutex::new(script.into()),
            fallback: None,
            calls: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Always replies with `content`.
    pub fn repeating(content: impl Into<String>) -> Self {
        let mut s = Self::new(Vec::new());
        s.fallback = Some(content.into());
        s
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().push(request.clone());
        let next = self.script.lock().pop_front();
        let content = match next {
            Some(r) => r?,
            None => match &self.fallback {
                Some(f) => f.clone(),
                None => {
                    return Err(GatewayError::Terminal {
                        endpoint: self.id.clone(),
                        message: "script exhausted".into(),
                    })
                }
            },
        };
        Ok(respond(&self.id, content, Duration::ZERO))
    }
}

/// Injects transient failures: each attempt at a given request fails with
/// probability `fail_rate`, decided by (seed, request hash, attempt number).
pub struct FlakyBackend {
    inner: Arc<dyn ChatBackend>,
    fail_rate: f64,
    seed: u64,
    attempts: Mutex<HashMap<u64, u64>>,
}

impl FlakyBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, fail_rate: f64, seed: u64) -> Self {
        FlakyBackend {
            inner,
            fail_rate,
            seed,
            attempts: Mutex::new(HashMap::new()),
        }
    }
}

impl ChatBackend for FlakyBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let hash = request.stable_hash();
        let attempt = {
            let mut map = self.attempts.lock();
            let n = map.entry(hash).or_insert(0);
            *n += 1;
            *n - 1
        };
        if keyed_unit(&[self.seed, hash, attempt]) < self.fail_rate {
            return Err(GatewayError::Transient {
                endpoint: self.inner.id().to_owned(),
                message: format!("injected failure on attempt {attempt}"),
            });
        }
        self.inner.complete(request)
    }

    fn concurrency(&self) -> Option<usize> {
        self.inner.concurrency()
    }
}
