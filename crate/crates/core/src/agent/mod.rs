//! Agents: profile, layered memory and prompt assembly.

mod memory;
mod profile;
mod prompt;

pub use memory::{
    retrieval_score, AgentMemory, MemoryConfig, MemoryKind, MemoryRecord, RetrievalWeights,
    REFLECTION_INSTRUCTION,
};
pub use profile::{load_population, parse_population, AgentId, AgentProfile};
pub use prompt::{render_prompt, PromptTemplate, DEFAULT_AGENT_TEMPLATE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatBackend, ChatRequest, GatewayError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("importance {0} is outside [0, 1]")]
    Importance(f64),
    #[error("memory round {record} is ahead of the current round {current}")]
    FutureRound { record: u64, current: u64 },
    #[error("invalid memory config: {0}")]
    Config(String),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("unbound placeholder `{{{0}}}` in prompt template")]
    UnboundPlaceholder(String),
    #[error("malformed prompt template: {0}")]
    Template(String),
    #[error("population file line {line}: {message}")]
    Population { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("reflection failed: {0}")]
    Backend(#[from] GatewayError),
}

/// One simulated individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub profile: AgentProfile,
    pub memory: AgentMemory,
}

impl Agent {
    pub fn new(profile: AgentProfile, config: MemoryConfig) -> Self {
        Agent {
            profile,
            memory: AgentMemory::new(config),
        }
    }

    pub fn id(&self) -> AgentId {
        self.profile.id
    }

    /// Memories to show in a prompt: the top retrieval hits followed by any
    /// short-term entries that retrieval did not already pick.
    pub fn recall(&self, query: &str, current_round: u64) -> Vec<&MemoryRecord> {
        let k = self.memory.config().retrieval_k;
        let mut picked = self.memory.retrieve_indices(query, k, current_round);
        for idx in self.memory.short_term_indices() {
            if !picked.contains(&idx) {
                picked.push(idx);
            }
        }
        picked
            .into_iter()
            .map(|i| &self.memory.long_term()[i])
            .collect()
    }

    /// The request a reflection would send, or `None` while the gate is closed.
    pub fn reflection_request(&self, current_round: u64, seed: u64) -> Option<ChatRequest> {
        if !self.memory.reflection_due() {
            return None;
        }
        let k = self.memory.config().retrieval_k;
        let memories = self.memory.retrieve("", k, current_round);
        let mut body = String::from(REFLECTION_INSTRUCTION);
        body.push('\n');
        for m in memories {
            body.push_str("- ");
            body.push_str(&m.content);
            body.push('\n');
        }
        Some(ChatRequest::user(body).with_seed(seed))
    }

    /// Store a reflection produced from [`Agent::reflection_request`].
    pub fn apply_reflection(&mut self, content: String, current_round: u64) -> MemoryRecord {
        let record = MemoryRecord::reflection(content, current_round);
        self.memory
            .append(record.clone(), current_round)
            .expect("reflection records are always valid");
        self.memory.reset_reflection_counter();
        record
    }

    /// Run one reflection step against `backend`.
    ///
    /// On backend failure the error is returned and the importance counter is
    /// left untouched so the next barrier retries.
    pub fn reflect(
        &mut self,
        backend: &dyn ChatBackend,
        current_round: u64,
    ) -> Result<Option<MemoryRecord>, AgentError> {
        let seed = crate::text::derive_key(&[self.id().0, current_round, 0x7ef1]);
        let Some(request) = self.reflection_request(current_round, seed) else {
            return Ok(None);
        };
        let response = backend.complete(&request)?;
        Ok(Some(self.apply_reflection(response.content, current_round)))
    }
}
