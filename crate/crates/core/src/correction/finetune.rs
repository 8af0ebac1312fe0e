use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::gateway::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMethod {
    Sft,
    Ppo,
}

#[derive(Deserialize)]
struct JobReply {
    job_id: String,
}

/// Hand an exported dataset to a training service: `POST {endpoint}/finetune`
/// with `{"dataset_path", "method"}`. Returns the service's job id without
/// waiting for training.
pub fn trigger_external_finetune(
    dataset_path: &Path,
    endpoint: &str,
    method: FinetuneMethod,
) -> Result<String, GatewayError> {
    let url = format!("{}/finetune", endpoint.trim_end_matches('/'));
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(30)))
        .http_status_as_error(false)
        .build()
        .into();
    let body = serde_json::json!({
        "dataset_path": dataset_path.display().to_string(),
        "method": method,
    });
    let mut resp = agent
        .post(&url)
        .send_json(&body)
        .map_err(|e| GatewayError::Transport {
            endpoint: url.clone(),
            message: e.to_string(),
        })?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(GatewayError::Status {
            endpoint: url,
            status,
        });
    }
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| GatewayError::Transport {
            endpoint: url.clone(),
            message: e.to_string(),
        })?;
    let reply: JobReply = serde_json::from_str(&text).map_err(|e| GatewayError::Protocol {
        endpoint: url.clone(),
        message: format!("expected {{\"job_id\": ..}}: {e}"),
    })?;
    Ok(reply.job_id)
}
