use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{MemoryConfig, PromptTemplate};
use crate::gateway::{BackendKind, RetryPolicy};
use crate::scenarios::{create_scenario, ScenarioError, SCENARIO_NAMES};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn default_workers() -> usize {
    1
}

/// A full simulation setup, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub scenario: String,
    #[serde(default)]
    pub scenario_params: serde_json::Value,
    pub num_agents: usize,
    pub rounds: u64,
    pub seed: u64,
    pub backend: BackendKind,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub prompt_template: PromptTemplate,
    /// JSON-lines profiles to use instead of generated ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population_path: Option<PathBuf>,
}

impl SimulationConfig {
    /// A config with defaults for everything but the essentials.
    pub fn new(scenario: &str, num_agents: usize, rounds: u64, seed: u64, backend: BackendKind) -> Self {
        SimulationConfig {
            scenario: scenario.to_owned(),
            scenario_params: serde_json::Value::Null,
            num_agents,
            rounds,
            seed,
            backend,
            workers: 1,
            memory: MemoryConfig::default(),
            retry: RetryPolicy::default(),
            prompt_template: PromptTemplate::default(),
            population_path: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: SimulationConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::new("<document>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !SCENARIO_NAMES.contains(&self.scenario.as_str()) {
            return Err(ConfigError::new(
                "scenario",
                format!("unknown scenario `{}`, expected one of {SCENARIO_NAMES:?}", self.scenario),
            ));
        }
        if self.num_agents == 0 {
            return Err(ConfigError::new("num_agents", "must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(ConfigError::new("rounds", "must be >= 1"));
        }
        if self.workers == 0 {
            return Err(ConfigError::new("workers", "must be >= 1"));
        }
        self.memory
            .validate()
            .map_err(|e| ConfigError::new("memory", e.to_string()))?;
        self.prompt_template
            .validate()
            .map_err(|e| ConfigError::new("prompt_template", e.to_string()))?;
        self.backend
            .validate()
            .map_err(|e| ConfigError::new("backend", e.to_string()))?;
        create_scenario(&self.scenario, &self.scenario_params, self.seed, self.num_agents)
            .map_err(scenario_config_error)?;
        Ok(())
    }
}

pub(crate) fn scenario_config_error(e: ScenarioError) -> ConfigError {
    match e {
        ScenarioError::Param { field, message } => {
            ConfigError::new(format!("scenario_params.{field}"), message)
        }
        ScenarioError::Unknown(_) => ConfigError::new("scenario", e.to_string()),
        other => ConfigError::new("scenario_params", other.to_string()),
    }
}
