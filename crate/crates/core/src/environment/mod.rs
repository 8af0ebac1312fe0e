//! Non-agent simulation state: globals, scenario state, interventions, and the
//! interview/search/checkpoint utilities.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, RngState, SimulationSnapshot, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{render_prompt, Agent, AgentError, AgentId, AgentProfile, PromptTemplate};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::text::{derive_key, stable_hash};

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("intervention for round {requested} is in the past (current round {current})")]
    PastRound { requested: u64, current: u64 },
    #[error("agent {0} not found")]
    AgentNotFound(AgentId),
    #[error("interview failed: {0}")]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EnvironmentState {
    /// Index of the next round to execute; equals the number of completed rounds.
    pub round: u64,
    pub globals: BTreeMap<String, String>,
    pub scenario_state: serde_json::Value,
    /// Broadcasts shown during the current round; cleared at the barrier.
    #[serde(default)]
    pub broadcasts: Vec<String>,
}

impl EnvironmentState {
    /// Apply due interventions: globals are set, broadcasts are queued for this
    /// round's views.
    pub fn apply(&mut self, interventions: &[Intervention]) {
        for i in interventions {
            match &i.kind {
                InterventionKind::SetGlobal { key, value } => {
                    self.globals.insert(key.clone(), value.clone());
                }
                InterventionKind::Broadcast { message } => self.broadcasts.push(message.clone()),
            }
        }
    }

    /// Shared environment text: broadcasts first, then global conditions.
    pub fn view(&self) -> String {
        let mut out = String::new();
        for b in &self.broadcasts {
            out.push_str("Announcement: ");
            out.push_str(b);
            out.push('\n');
        }
        if !self.globals.is_empty() {
            out.push_str("Global conditions:\n");
            for (k, v) in &self.globals {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InterventionKind {
    SetGlobal { key: String, value: String },
    Broadcast { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Issuer {
    #[default]
    Api,
    Ui,
    Script,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub apply_at_round: u64,
    pub kind: InterventionKind,
    #[serde(default)]
    pub issued_by: Issuer,
}

/// Pending interventions. Submission is safe from any thread; the scheduler
/// drains due entries at the round barrier.
#[derive(Debug, Default)]
pub struct InterventionQueue {
    current_round: AtomicU64,
    pending: Mutex<Vec<Intervention>>,
}

impl InterventionQueue {
    pub fn new(current_round: u64, pending: Vec<Intervention>) -> Self {
        InterventionQueue {
            current_round: AtomicU64::new(current_round),
            pending: Mutex::new(pending),
        }
    }

    pub fn submit(&self, intervention: Intervention) -> Result<(), EnvironmentError> {
        let mut pending = self.pending.lock();
        let current = self.current_round.load(Ordering::SeqCst);
        if intervention.apply_at_round < current {
            return Err(EnvironmentError::PastRound {
                requested: intervention.apply_at_round,
                current,
            });
        }
        pending.push(intervention);
        Ok(())
    }

    /// Remove and return every intervention due at or before `round`, in
    /// submission order.
    pub(crate) fn take_due(&self, round: u64) -> Vec<Intervention> {
        let mut pending = self.pending.lock();
        let (due, keep): (Vec<_>, Vec<_>) =
            pending.drain(..).partition(|i| i.apply_at_round <= round);
        *pending = keep;
        due
    }

    /// Put interventions back at the front (used when a round is aborted).
    pub(crate) fn restore_front(&self, mut items: Vec<Intervention>) {
        let mut pending = self.pending.lock();
        items.append(&mut pending);
        *pending = items;
    }

    pub(crate) fn set_round(&self, round: u64) {
        let _guard = self.pending.lock();
        self.current_round.store(round, Ordering::SeqCst);
    }

    pub fn current_round(&self) -> u64 {
        self.current_round.load(Ordering::SeqCst)
    }

    pub fn pending(&self) -> Vec<Intervention> {
        self.pending.lock().clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterviewExchange {
    pub agent_id: AgentId,
    pub question: String,
    pub answer: String,
    pub round: u64,
}

/// Find an agent in an id-sorted slice.
pub fn find_agent(agents: &[Agent], id: AgentId) -> Option<&Agent> {
    agents
        .binary_search_by_key(&id, |a| a.id())
        .ok()
        .map(|i| &agents[i])
}

/// Ask one agent a question. Reads the agent, never writes to it.
pub fn interview(
    agents: &[Agent],
    id: AgentId,
    question: &str,
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    round: u64,
) -> Result<InterviewExchange, EnvironmentError> {
    let agent = find_agent(agents, id).ok_or(EnvironmentError::AgentNotFound(id))?;
    let memories = agent.recall(question, round);
    let prompt = render_prompt(
        template,
        &agent.profile,
        &memories,
        "You are being interviewed by an observer.",
        &format!("Answer the interviewer's question: {question}"),
    )?;
    let seed = derive_key(&[stable_hash(question.as_bytes()), id.0, round, 0x1e7]);
    let response = backend.complete(&ChatRequest::user(prompt).with_seed(seed))?;
    Ok(InterviewExchange {
        agent_id: id,
        question: question.to_owned(),
        answer: response.content,
        round,
    })
}

/// Profiles whose public attribute values contain `query` (case-insensitive),
/// in id order. Private attributes are never searched.
pub fn search_agents<'a>(agents: &'a [Agent], query: &str) -> Vec<&'a AgentProfile> {
    let q = query.to_lowercase();
    let mut out: Vec<&AgentProfile> = agents
        .iter()
        .map(|a| &a.profile)
        .filter(|p| {
            q.is_empty()
                || p
                    .public_attrs
                    .values()
                    .any(|v| v.to_lowercase().contains(&q))
        })
        .collect();
    out.sort_by_key(|p| p.id);
    out
}
