//! Multi-party interaction generation.
//!
//! Script mode asks one meta-agent call for the whole dialogue, written in
//! the third person. Agent mode issues one first-person call per turn, each
//! conditioned on every earlier turn.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{render_prompt, Agent, AgentError, MemoryRecord, PromptTemplate};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::text::derive_key;

#[derive(Debug, Error)]
pub enum InteractionError {
    #[error("an interaction needs at least 2 participants, got {0}")]
    TooFewRoles(usize),
    #[error("max_turns must be >= 1")]
    NoTurns,
    #[error("duplicate role name `{0}`")]
    DuplicateRole(String),
    #[error("no `<RoleName>: <content>` lines in model output: {raw:?}")]
    Format { raw: String },
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub name: String,
    pub persona: String,
}

impl Role {
    pub fn from_agent(agent: &Agent) -> Self {
        Role {
            name: agent.profile.name().to_owned(),
            persona: agent.profile.render_public(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    Script,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub content: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub mode: InteractionMode,
    pub turns: Vec<Turn>,
    pub llm_calls: usize,
}

impl Transcript {
    /// Checks the structural invariants against the declared role names.
    pub fn check(&self, roles: &[String]) -> Result<(), String> {
        for (i, t) in self.turns.iter().enumerate() {
            if t.index != i {
                return Err(format!("turn {i} has index {}", t.index));
            }
            if t.content.is_empty() {
                return Err(format!("turn {i} is empty"));
            }
            if !roles.contains(&t.speaker) {
                return Err(format!("turn {i} speaker {} is not a role", t.speaker));
            }
        }
        match self.mode {
            InteractionMode::Script if self.llm_calls != 1 => {
                Err(format!("script mode made {} calls", self.llm_calls))
            }
            InteractionMode::Agent if self.llm_calls != self.turns.len() => Err(format!(
                "agent mode made {} calls for {} turns",
                self.llm_calls,
                self.turns.len()
            )),
            _ => Ok(()),
        }
    }

    fn history(&self) -> String {
        let mut out = String::new();
        for t in &self.turns {
            out.push_str(&t.speaker);
            out.push_str(": ");
            out.push_str(&t.content);
            out.push('\n');
        }
        out
    }
}

fn check_roles(names: &[String], max_turns: usize) -> Result<(), InteractionError> {
    if names.len() < 2 {
        return Err(InteractionError::TooFewRoles(names.len()));
    }
    if max_turns == 0 {
        return Err(InteractionError::NoTurns);
    }
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(InteractionError::DuplicateRole(n.clone()));
        }
    }
    Ok(())
}

/// The meta-agent prompt for script mode. Each role is announced on a
/// `role:<Name>` line.
pub fn script_prompt(roles: &[Role], topic: &str, max_turns: usize) -> String {
    let mut p = String::from(
        "You are a narrator writing a dialogue from a third-person perspective.\n",
    );
    p.push_str("Topic: ");
    p.push_str(topic);
    p.push_str("\nParticipants:\n");
    for r in roles {
        p.push_str("role:");
        p.push_str(&r.name);
        p.push('\n');
        for line in r.persona.lines() {
            p.push_str("  ");
            p.push_str(line);
            p.push('\n');
        }
    }
    p.push_str(&format!(
        "Write at most {max_turns} lines. Format every line exactly as `<RoleName>: <content>`."
    ));
    p
}

/// Parse `<RoleName>: <content>` lines with exact name matches; anything else
/// is dropped.
pub fn parse_script(raw: &str, roles: &[Role], max_turns: usize) -> Vec<Turn> {
    let mut turns = Vec::new();
    for line in raw.lines() {
        if turns.len() >= max_turns {
            break;
        }
        let Some((name, content)) = line.split_once(':') else {
            continue;
        };
        let (name, content) = (name.trim(), content.trim());
        if content.is_empty() || !roles.iter().any(|r| r.name == name) {
            continue;
        }
        turns.push(Turn {
            speaker: name.to_owned(),
            content: content.to_owned(),
            index: turns.len(),
        });
    }
    turns
}

pub fn run_script_mode(
    roles: &[Role],
    topic: &str,
    max_turns: usize,
    backend: &dyn ChatBackend,
) -> Result<Transcript, InteractionError> {
    let names: Vec<String> = roles.iter().map(|r| r.name.clone()).collect();
    check_roles(&names, max_turns)?;
    let response = backend.complete(&ChatRequest::user(script_prompt(roles, topic, max_turns)))?;
    let turns = parse_script(&response.content, roles, max_turns);
    if turns.is_empty() {
        return Err(InteractionError::Format {
            raw: response.content,
        });
    }
    Ok(Transcript {
        mode: InteractionMode::Script,
        turns,
        llm_calls: 1,
    })
}

/// Settings for an agent-mode dialogue inside a simulation round.
#[derive(Debug, Clone)]
pub struct DialogueContext<'a> {
    pub template: &'a PromptTemplate,
    pub round: u64,
    pub seed: u64,
    /// Extra environment text (globals, broadcasts) shown to every speaker.
    pub env_view: &'a str,
}

/// Result of an agent-mode dialogue. On a terminal backend failure the
/// transcript holds the turns completed before it, `error` is set and the
/// last entry of `prompts` is the prompt that failed.
#[derive(Debug)]
pub struct DialogueRun {
    pub transcript: Transcript,
    pub prompts: Vec<String>,
    pub latencies: Vec<Duration>,
    pub error: Option<GatewayError>,
}

/// Role names for a group, disambiguated with the agent id when two profiles
/// share a name.
pub fn speaker_names(agents: &[Agent]) -> Vec<String> {
    let names: Vec<&str> = agents.iter().map(|a| a.profile.name()).collect();
    agents
        .iter()
        .map(|a| {
            let n = a.profile.name();
            if names.iter().filter(|m| **m == n).count() > 1 {
                format!("{n} #{}", a.id())
            } else {
                n.to_owned()
            }
        })
        .collect()
}

pub fn run_agent_mode(
    agents: &mut [Agent],
    topic: &str,
    max_turns: usize,
    backend: &dyn ChatBackend,
    ctx: &DialogueContext<'_>,
) -> Result<DialogueRun, InteractionError> {
    let names = speaker_names(agents);
    check_roles(&names, max_turns)?;
    let mut run = DialogueRun {
        transcript: Transcript {
            mode: InteractionMode::Agent,
            turns: Vec::with_capacity(max_turns),
            llm_calls: 0,
        },
        prompts: Vec::with_capacity(max_turns),
        latencies: Vec::with_capacity(max_turns),
        error: None,
    };
    for t in 0..max_turns {
        let who = t % agents.len();
        let speaker = &names[who];
        let mut view = String::new();
        if !ctx.env_view.is_empty() {
            view.push_str(ctx.env_view);
            view.push('\n');
        }
        view.push_str(&format!(
            "Conversation topic: {topic}\nParticipants: {}\nConversation so far:\n",
            names.join(", ")
        ));
        if run.transcript.turns.is_empty() {
            view.push_str("(nothing yet)\n");
        } else {
            view.push_str(&run.transcript.history());
        }
        let instruction = format!("Reply with your next line in the conversation as {speaker}.");
        let agent = &agents[who];
        let memories = agent.recall(topic, ctx.round);
        let prompt = render_prompt(ctx.template, &agent.profile, &memories, &view, &instruction)?;
        let request = ChatRequest::user(prompt.clone())
            .with_seed(derive_key(&[ctx.seed, agent.id().0, t as u64]));
        run.prompts.push(prompt);
        let response = match backend.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                run.error = Some(e);
                return Ok(run);
            }
        };
        run.transcript.llm_calls += 1;
        let mut content = response.content.trim().replace('\n', " ");
        if content.is_empty() {
            content = "(silence)".to_owned();
        }
        agents[who].memory.append(
            MemoryRecord::observation(format!("{speaker}: {content}"), ctx.round, 0.5),
            ctx.round,
        )?;
        run.latencies.push(response.latency);
        run.transcript.turns.push(Turn {
            speaker: speaker.clone(),
            content,
            index: t,
        });
    }
    Ok(run)
}
