//! Built-in scenarios and the contract every scenario implements.
//!
//! A scenario plans one round as a list of [`Task`]s, parses raw model output
//! into actions (never failing), and resolves all actions of a round in the
//! single-threaded barrier phase.

mod discussion;
mod job_market;
mod ratings;
mod recommender;

pub use discussion::{DiscussionParams, GroupDiscussion};
pub use job_market::{job_action_is_valid, JobMarket, JobMarketParams, JobPosting};
pub use ratings::{clamp_rating, load_ratings_csv, parse_ratings_csv, rating_index, RatingRecord};
pub use recommender::{CatalogItem, RatingAction, Recommender, RecommenderParams};

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentId, AgentProfile, MemoryRecord};
use crate::interaction::Transcript;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}` (expected job_market, recommender or group_discussion)")]
    Unknown(String),
    #[error("invalid scenario parameter `{field}`: {message}")]
    Param { field: String, message: String },
    #[error("scenario state: {0}")]
    State(String),
    #[error("{path}: {message}")]
    Load { path: String, message: String },
}

impl ScenarioError {
    pub(crate) fn param(field: &str, message: impl Into<String>) -> Self {
        ScenarioError::Param {
            field: field.to_owned(),
            message: message.into(),
        }
    }
}

pub const SCENARIO_NAMES: [&str; 3] = ["job_market", "recommender", "group_discussion"];

/// A parsed action. `fallback` marks output that could not be parsed and was
/// replaced by the scenario's default action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAction {
    pub value: serde_json::Value,
    pub fallback: bool,
}

/// One unit of round work. Agent indices refer to the id-sorted population.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    /// One backend call for one agent.
    Act {
        agent: usize,
        instruction: String,
        view: String,
    },
    /// An agent-mode dialogue among several agents.
    Dialogue {
        members: Vec<usize>,
        topic: String,
        max_turns: usize,
    },
}

/// Outcome of one `Act` task as seen by `resolve`; `parsed` is `None` when the
/// backend call failed terminally.
#[derive(Debug, Clone)]
pub struct ResolvedAction {
    pub agent_id: AgentId,
    pub parsed: Option<ParsedAction>,
}

#[derive(Debug, Clone)]
pub struct DialogueOutcome {
    pub members: Vec<AgentId>,
    pub transcript: Transcript,
}

/// State changes requested by `resolve`, applied by the scheduler.
#[derive(Debug, Default)]
pub struct Resolution {
    pub memories: Vec<(AgentId, MemoryRecord)>,
    /// Default actions substituted for unusable output.
    pub fallbacks: usize,
}

pub trait Scenario: Send + Sync {
    fn name(&self) -> &'static str;

    fn generate_profile(&self, id: AgentId, rng: &mut ChaCha8Rng) -> AgentProfile {
        base_profile(id, rng)
    }

    fn plan(&self, round: u64, agents: &[Agent]) -> Vec<Task>;

    /// Total: any input yields an action.
    fn parse(&self, agent: AgentId, raw: &str) -> ParsedAction;

    /// Barrier-phase resolution. `actions` are sorted by agent id.
    fn resolve(
        &mut self,
        round: u64,
        actions: &[ResolvedAction],
        dialogues: &[DialogueOutcome],
    ) -> Resolution;

    fn state(&self) -> serde_json::Value;

    fn load_state(&mut self, state: &serde_json::Value) -> Result<(), ScenarioError>;
}

/// Build a scenario by name. `params` may be `null` for defaults.
pub fn create_scenario(
    name: &str,
    params: &serde_json::Value,
    seed: u64,
    num_agents: usize,
) -> Result<Box<dyn Scenario>, ScenarioError> {
    match name {
        "job_market" => Ok(Box::new(JobMarket::new(parse_params(params)?, seed)?)),
        "recommender" => Ok(Box::new(Recommender::new(parse_params(params)?, seed)?)),
        "group_discussion" => Ok(Box::new(GroupDiscussion::new(
            parse_params(params)?,
            num_agents,
        )?)),
        other => Err(ScenarioError::Unknown(other.to_owned())),
    }
}

fn parse_params<T: DeserializeOwned + Default>(v: &serde_json::Value) -> Result<T, ScenarioError> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| ScenarioError::param("scenario_params", e.to_string()))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ScenarioError> {
    let load = |message: String| ScenarioError::Load {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| load(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| load(format!("line {}: {e}", i + 1))))
        .collect()
}

const FIRST_NAMES: [&str; 24] = [
    "Alice", "Bruno", "Chen", "Dalia", "Emeka", "Farah", "Goran", "Hana", "Ivan", "Jun", "Kofi",
    "Lena", "Mateo", "Nadia", "Omar", "Priya", "Quinn", "Rosa", "Sven", "Tariq", "Uma", "Viktor",
    "Wen", "Yara",
];
const LAST_NAMES: [&str; 16] = [
    "Smith", "Garcia", "Wang", "Okafor", "Novak", "Haddad", "Silva", "Kim", "Muller", "Rossi",
    "Tanaka", "Dubois", "Kowalski", "Ahmed", "Larsen", "Costa",
];
const BIRTHPLACES: [&str; 10] = [
    "Lisbon", "Nairobi", "Osaka", "Toronto", "Krakow", "Lima", "Cairo", "Melbourne", "Chennai",
    "Bergen",
];
const HEALTH: [&str; 5] = ["excellent", "good", "fair", "chronic back pain", "asthma"];

/// Synthetic profile with the common public and private attributes.
pub fn base_profile(id: AgentId, rng: &mut ChaCha8Rng) -> AgentProfile {
    let first = FIRST_NAMES[rng.random_range(0..FIRST_NAMES.len())];
    let last = LAST_NAMES[rng.random_range(0..LAST_NAMES.len())];
    AgentProfile::new(id, format!("{first} {last}"))
        .with_public("gender", if rng.random_bool(0.5) { "female" } else { "male" })
        .with_public("age", rng.random_range(18..80u32).to_string())
        .with_public("birthplace", BIRTHPLACES[rng.random_range(0..BIRTHPLACES.len())])
        .with_private("income", (rng.random_range(15..200u32) * 1000).to_string())
        .with_private("health", HEALTH[rng.random_range(0..HEALTH.len())])
}
