use serde::{Deserialize, Serialize};

use super::{
    DialogueOutcome, ParsedAction, Resolution, ResolvedAction, Scenario, ScenarioError, Task,
};
use crate::agent::{Agent, AgentId};
use crate::interaction::Turn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscussionParams {
    pub topic: String,
    pub group_size: usize,
    pub max_turns: usize,
}

impl Default for DiscussionParams {
    fn default() -> Self {
        DiscussionParams {
            topic: "How should our town spend next year's budget?".into(),
            group_size: 5,
            max_turns: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTranscript {
    members: Vec<AgentId>,
    turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct DiscussionState {
    rounds: u64,
    total_turns: u64,
    /// Transcripts of the most recent round.
    transcripts: Vec<StoredTranscript>,
}

pub struct GroupDiscussion {
    params: DiscussionParams,
    state: DiscussionState,
}

/// Split `n` agents into consecutive groups of `size`. A trailing group of
/// one joins the group before it.
pub fn partition_groups(n: usize, size: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(size)
        .map(<[usize]>::to_vec)
        .collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let last = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(last);
    }
    groups
}

impl GroupDiscussion {
    pub fn new(params: DiscussionParams, num_agents: usize) -> Result<Self, ScenarioError> {
        if params.group_size < 2 {
            return Err(ScenarioError::param("group_size", "a discussion needs at least 2 agents"));
        }
        if num_agents < 2 {
            return Err(ScenarioError::param(
                "num_agents",
                "group discussion needs at least 2 agents",
            ));
        }
        if params.max_turns == 0 {
            return Err(ScenarioError::param("max_turns", "must be >= 1"));
        }
        Ok(GroupDiscussion {
            params,
            state: DiscussionState::default(),
        })
    }

    pub fn params(&self) -> &DiscussionParams {
        &self.params
    }
}

impl Scenario for GroupDiscussion {
    fn name(&self) -> &'static str {
        "group_discussion"
    }

    fn plan(&self, _round: u64, agents: &[Agent]) -> Vec<Task> {
        partition_groups(agents.len(), self.params.group_size)
            .into_iter()
            .filter(|g| g.len() >= 2)
            .map(|members| Task::Dialogue {
                members,
                topic: self.params.topic.clone(),
                max_turns: self.params.max_turns,
            })
            .collect()
    }

    fn parse(&self, _agent: AgentId, raw: &str) -> ParsedAction {
        ParsedAction {
            value: serde_json::json!({ "utterance": raw.trim() }),
            fallback: false,
        }
    }

    fn resolve(
        &mut self,
        _round: u64,
        _actions: &[ResolvedAction],
        dialogues: &[DialogueOutcome],
    ) -> Resolution {
        self.state.rounds += 1;
        self.state.transcripts = dialogues
            .iter()
            .map(|d| StoredTranscript {
                members: d.members.clone(),
                turns: d.transcript.turns.clone(),
            })
            .collect();
        self.state.total_turns += dialogues
            .iter()
            .map(|d| d.transcript.turns.len() as u64)
            .sum::<u64>();
        // Speakers already remember their own turns.
        Resolution::default()
    }

    fn state(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("discussion state serializes")
    }

    fn load_state(&mut self, state: &serde_json::Value) -> Result<(), ScenarioError> {
        self.state = if state.is_null() {
            DiscussionState::default()
        } else {
            serde_json::from_value(state.clone()).map_err(|e| ScenarioError::State(e.to_string()))?
        };
        Ok(())
    }
}
