//! OpenAI-compatible chat-completions client for a single endpoint.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, ChatRequest, ChatResponse, EndpointSpec, GatewayError};
use crate::text::estimate_tokens;

/// Bearer token for every HTTP endpoint, when set.
pub const API_KEY_ENV: &str = "GENSIM_API_KEY";

pub struct HttpEndpoint {
    id: String,
    spec: EndpointSpec,
    agent: ureq::Agent,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

impl HttpEndpoint {
    pub fn new(id: impl Into<String>, spec: EndpointSpec) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(spec.timeout_ms)))
            .http_status_as_error(false)
            .build();
        HttpEndpoint {
            id: id.into(),
            spec,
            agent: config.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn url(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.spec.base_url.trim_end_matches('/')
        )
    }

    fn map_err(&self, e: ureq::Error) -> GatewayError {
        match e {
            ureq::Error::Timeout(_) => GatewayError::Timeout {
                endpoint: self.id.clone(),
            },
            ureq::Error::StatusCode(status) => GatewayError::Status {
                endpoint: self.id.clone(),
                status,
            },
            other => GatewayError::Transport {
                endpoint: self.id.clone(),
                message: other.to_string(),
            },
        }
    }
}

impl ChatBackend for HttpEndpoint {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let mut body = json!({
            "model": self.spec.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let start = Instant::now();
        let mut call = self.agent.post(&self.url());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| self.map_err(e))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status {
                endpoint: self.id.clone(),
                status,
            });
        }
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| self.map_err(e))?;
        let parsed: CompletionBody =
            serde_json::from_str(&text).map_err(|e| GatewayError::Protocol {
                endpoint: self.id.clone(),
                message: e.to_string(),
            })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Protocol {
                endpoint: self.id.clone(),
                message: "response has no choices[0].message.content".into(),
            })?;
        Ok(ChatResponse {
            token_estimate: estimate_tokens(&content),
            content,
            latency: start.elapsed(),
            backend_id: self.id.clone(),
        })
    }

    fn concurrency(&self) -> Option<usize> {
        Some(self.spec.max_concurrent)
    }
}
