//! Backend-agnostic chat-completion layer.
//!
//! Everything that talks to a model implements [`ChatBackend`]: the mocks used
//! by tests and experiments, the OpenAI-compatible HTTP client, the multi
//! endpoint [`EndpointPool`], and wrappers such as [`Gateway`] (retries and
//! metrics) or the revision adapter from the correction module. Calls block
//! the calling thread; parallelism comes from the caller's worker lanes.

mod http;
mod mock;
mod pool;
mod retry;

pub use http::{HttpEndpoint, API_KEY_ENV};
pub use mock::{
    format_rating, DeterministicMock, FlakyBackend, LatencyModel, ScriptedBackend, StochasticMock,
    RATING_GRID,
};
pub use pool::{EndpointPool, PoolEndpoint};
pub use retry::{retry_with_backoff, RetryPolicy};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::System => 0,
            Role::User => 1,
            Role::Assistant => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Single user message with default sampling parameters.
    pub fn user(content: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage {
                role: Role::User,
                content: content.into(),
            }],
            temperature: 0.7,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::Invalid("request has no messages".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::Invalid(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Invalid("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// All message contents joined by newlines.
    pub fn prompt_text(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.messages.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&m.content);
        }
        out
    }

    /// Stable hash of (messages, seed). Sampling parameters are excluded.
    pub fn stable_hash(&self) -> u64 {
        let mut buf = Vec::with_capacity(256);
        for m in &self.messages {
            buf.push(m.role.tag());
            buf.extend_from_slice(&(m.content.len() as u64).to_le_bytes());
            buf.extend_from_slice(m.content.as_bytes());
        }
        match self.seed {
            Some(s) => {
                buf.push(1);
                buf.extend_from_slice(&s.to_le_bytes());
            }
            None => buf.push(0),
        }
        stable_hash(&buf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub latency: Duration,
    pub backend_id: String,
    pub token_estimate: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("endpoint {endpoint}: timed out")]
    Timeout { endpoint: String },
    #[error("endpoint {endpoint}: http status {status}")]
    Status { endpoint: String, status: u16 },
    #[error("endpoint {endpoint}: transport error: {message}")]
    Transport { endpoint: String, message: String },
    #[error("endpoint {endpoint}: transient failure: {message}")]
    Transient { endpoint: String, message: String },
    #[error("endpoint {endpoint}: protocol error: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("endpoint {endpoint}: {message}")]
    Terminal { endpoint: String, message: String },
    #[error("endpoint {endpoint}: gave up after {attempts} attempt(s): {last}")]
    Exhausted {
        endpoint: String,
        attempts: u32,
        last: Box<GatewayError>,
    },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Timeout { .. }
                | GatewayError::Status { .. }
                | GatewayError::Transport { .. }
                | GatewayError::Transient { .. }
        )
    }

    pub fn endpoint(&self) -> Option<&str> {
        match self {
            GatewayError::Invalid(_) => None,
            GatewayError::Timeout { endpoint }
            | GatewayError::Status { endpoint, .. }
            | GatewayError::Transport { endpoint, .. }
            | GatewayError::Transient { endpoint, .. }
            | GatewayError::Protocol { endpoint, .. }
            | GatewayError::Terminal { endpoint, .. }
            | GatewayError::Exhausted { endpoint, .. } => Some(endpoint),
        }
    }
}

/// A chat-completion backend. Implementations must be safe to share across
/// worker threads.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// Maximum useful number of concurrent callers; `None` means unbounded.
    fn concurrency(&self) -> Option<usize> {
        None
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }

    fn concurrency(&self) -> Option<usize> {
        (**self).concurrency()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub base_url: String,
    pub model: String,
    pub max_concurrent: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

/// Backend selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    MockDeterministic {
        seed: u64,
        #[serde(default)]
        latency: LatencyModel,
    },
    MockStochastic {
        seed: u64,
        rating_weights: Vec<f64>,
        #[serde(default)]
        latency: LatencyModel,
    },
    HttpOpenaiCompatible { endpoints: Vec<EndpointSpec> },
}

impl BackendKind {
    pub fn validate(&self) -> Result<(), GatewayError> {
        match self {
            BackendKind::MockDeterministic { latency, .. } => latency.validate(),
            BackendKind::MockStochastic {
                rating_weights,
                latency,
                ..
            } => {
                validate_rating_weights(rating_weights)?;
                latency.validate()
            }
            BackendKind::HttpOpenaiCompatible { endpoints } => {
                if endpoints.is_empty() {
                    return Err(GatewayError::Invalid("no endpoints configured".into()));
                }
                for e in endpoints {
                    if e.max_concurrent == 0 {
                        return Err(GatewayError::Invalid(format!(
                            "endpoint {}: max_concurrent must be >= 1",
                            e.base_url
                        )));
                    }
                    url::Url::parse(&e.base_url).map_err(|err| {
                        GatewayError::Invalid(format!("endpoint {}: {err}", e.base_url))
                    })?;
                }
                Ok(())
            }
        }
    }

    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, GatewayError> {
        self.validate()?;
        Ok(match self {
            BackendKind::MockDeterministic { seed, latency } => {
                Arc::new(DeterministicMock::new(*seed).with_latency(latency.clone()))
            }
            BackendKind::MockStochastic {
                seed,
                rating_weights,
                latency,
            } => Arc::new(StochasticMock::new(*seed, rating_weights, latency.clone())?),
            BackendKind::HttpOpenaiCompatible { endpoints } => {
                let members = endpoints
                    .iter()
                    .enumerate()
                    .map(|(i, spec)| {
                        PoolEndpoint::new(
                            Arc::new(HttpEndpoint::new(format!("http-{i}"), spec.clone())),
                            spec.max_concurrent,
                        )
                    })
                    .collect();
                Arc::new(EndpointPool::new("http-pool", members)?)
            }
        })
    }
}

pub fn validate_rating_weights(weights: &[f64]) -> Result<(), GatewayError> {
    if weights.len() != RATING_GRID.len() {
        return Err(GatewayError::Invalid(format!(
            "rating_weights must have {} entries, got {}",
            RATING_GRID.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(GatewayError::Invalid(
            "rating_weights must be non-negative".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(GatewayError::Invalid(format!(
            "rating_weights must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// Per-attempt latency metrics.
#[derive(Debug, Default)]
pub struct GatewayMetrics {
    attempts: AtomicU64,
    failures: AtomicU64,
    total_latency_nanos: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub attempts: u64,
    pub failures: u64,
    pub total_latency: Duration,
}

impl GatewayMetrics {
    fn record(&self, latency: Duration, ok: bool) {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        if !ok {
            self.failures.fetch_add(1, Ordering::Relaxed);
        }
        self.total_latency_nanos
            .fetch_add(latency.as_nanos() as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            attempts: self.attempts.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            total_latency: Duration::from_nanos(self.total_latency_nanos.load(Ordering::Relaxed)),
        }
    }
}

/// Wraps a backend with the retry policy and latency metrics.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    metrics: GatewayMetrics,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, retry: RetryPolicy) -> Self {
        Gateway {
            backend,
            retry,
            metrics: GatewayMetrics::default(),
        }
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    pub fn inner(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }
}

impl ChatBackend for Gateway {
    fn id(&self) -> &str {
        self.backend.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        retry_with_backoff(
            |_| {
                let start = Instant::now();
                let result = self.backend.complete(request);
                self.metrics.record(start.elapsed(), result.is_ok());
                result
            },
            self.retry.budget,
            self.retry.base_delay(),
        )
    }

    fn concurrency(&self) -> Option<usize> {
        self.backend.concurrency()
    }
}
