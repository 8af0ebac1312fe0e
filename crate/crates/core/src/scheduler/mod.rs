//! Round-based execution: plan, dispatch over worker lanes, barrier, resolve.
//!
//! All randomness is keyed by (seed, round, agent), and every cross-agent
//! effect is applied after the barrier in agent id order, so the event log is
//! the same for any worker count.

mod config;
mod population;

pub use config::{ConfigError, SimulationConfig};
pub use population::spawn_population;

use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{load_population, render_prompt, Agent, AgentError, AgentId, AgentProfile};
use crate::environment::{
    self, read_checkpoint, write_checkpoint, EnvironmentError, EnvironmentState, InterventionQueue,
    InterviewExchange, RngState, SimulationSnapshot,
};
use crate::gateway::{ChatBackend, ChatRequest, Gateway, GatewayError, MetricsSnapshot};
use crate::interaction::{run_agent_mode, speaker_names, DialogueContext, InteractionError};
use crate::lanes::parallel_map;
use crate::scenarios::{
    create_scenario, DialogueOutcome, ResolvedAction, Scenario, ScenarioError, Task,
};
use crate::text::derive_key;

use config::scenario_config_error;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error("round {round} aborted: {failed} of {total} tasks failed")]
    RoundAborted { round: u64, failed: usize, total: usize },
    #[error("event log: {0}")]
    Log(#[from] std::io::Error),
}

/// One model call and its outcome, as written to the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub seq: u64,
    pub round: u64,
    pub agent_id: AgentId,
    pub q: String,
    pub a: String,
    pub parsed: serde_json::Value,
    pub latency_ms: f64,
    /// Set when the call failed terminally; `a` is then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ActionEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub events: usize,
    #[serde(with = "duration_ms")]
    pub wall_time: Duration,
    /// Calls that failed after retries.
    pub errors: usize,
    /// Unusable outputs replaced by a scenario default.
    pub fallbacks: usize,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(ms.max(0.0) / 1000.0))
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub report: RoundReport,
    pub events: Vec<ActionEvent>,
}

/// Cooperative stop flag, checked at round boundaries.
#[derive(Debug, Clone, Default)]
pub struct StopHandle(Arc<AtomicBool>);

impl StopHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

/// An event before sequence numbers are assigned.
struct Pending {
    agent_id: AgentId,
    slot: usize,
    q: String,
    a: String,
    parsed: serde_json::Value,
    latency: Duration,
    error: Option<String>,
}

enum TaskResult {
    Act {
        event: Pending,
        action: ResolvedAction,
    },
    Dialogue {
        members: Vec<usize>,
        agents: Vec<Agent>,
        events: Vec<Pending>,
        outcome: DialogueOutcome,
        failed: bool,
    },
}

pub struct Simulation {
    config: SimulationConfig,
    agents: Vec<Agent>,
    env: EnvironmentState,
    scenario: Box<dyn Scenario>,
    gateway: Arc<Gateway>,
    queue: Arc<InterventionQueue>,
    next_seq: u64,
}

impl Simulation {
    /// Validate the config, build the backend, and create the population.
    pub fn new(config: SimulationConfig) -> Result<Self, SimulationError> {
        config.validate()?;
        let backend = config
            .backend
            .build()
            .map_err(|e| ConfigError::new("backend", e.to_string()))?;
        Self::with_backend(config, backend)
    }

    /// Like [`Simulation::new`] but with a caller-supplied backend; the
    /// config's `backend` field is kept for the record only.
    pub fn with_backend(
        config: SimulationConfig,
        backend: Arc<dyn ChatBackend>,
    ) -> Result<Self, SimulationError> {
        config.validate()?;
        let scenario = create_scenario(
            &config.scenario,
            &config.scenario_params,
            config.seed,
            config.num_agents,
        )
        .map_err(scenario_config_error)?;
        let profiles: Vec<AgentProfile> = match &config.population_path {
            Some(path) => {
                let profiles = load_population(path)?;
                if profiles.len() != config.num_agents {
                    return Err(ConfigError::new(
                        "num_agents",
                        format!(
                            "population file holds {} profiles, config says {}",
                            profiles.len(),
                            config.num_agents
                        ),
                    )
                    .into());
                }
                profiles
            }
            None => spawn_population(
                config.num_agents,
                |id, rng| scenario.generate_profile(id, rng),
                config.seed,
            ),
        };
        let mut agents: Vec<Agent> = profiles
            .into_iter()
            .map(|p| Agent::new(p, config.memory))
            .collect();
        agents.sort_by_key(Agent::id);
        let env = EnvironmentState {
            scenario_state: scenario.state(),
            ..Default::default()
        };
        let gateway = Arc::new(Gateway::new(backend, config.retry));
        Ok(Simulation {
            config,
            agents,
            env,
            scenario,
            gateway,
            queue: Arc::new(InterventionQueue::new(0, Vec::new())),
            next_seq: 1,
        })
    }

    /// Resume from a snapshot with the given backend.
    pub fn from_snapshot(
        snapshot: SimulationSnapshot,
        backend: Arc<dyn ChatBackend>,
    ) -> Result<Self, SimulationError> {
        let SimulationSnapshot {
            config,
            agents,
            env,
            rng,
            pending,
        } = snapshot;
        config.validate()?;
        if rng.seed != config.seed {
            return Err(EnvironmentError::Checkpoint("rng seed differs from config seed".into()).into());
        }
        let mut scenario = create_scenario(
            &config.scenario,
            &config.scenario_params,
            config.seed,
            config.num_agents,
        )
        .map_err(scenario_config_error)?;
        scenario.load_state(&env.scenario_state)?;
        let gateway = Arc::new(Gateway::new(backend, config.retry));
        Ok(Simulation {
            queue: Arc::new(InterventionQueue::new(env.round, pending)),
            config,
            agents,
            env,
            scenario,
            gateway,
            next_seq: rng.next_seq,
        })
    }

    /// Load a checkpoint and rebuild the backend from its config.
    pub fn restore(path: &Path) -> Result<Self, SimulationError> {
        let snap = read_checkpoint(path)?;
        let backend = snap
            .config
            .backend
            .build()
            .map_err(|e| ConfigError::new("backend", e.to_string()))?;
        Self::from_snapshot(snap, backend)
    }

    pub fn snapshot(&self) -> SimulationSnapshot {
        SimulationSnapshot {
            config: self.config.clone(),
            agents: self.agents.clone(),
            env: self.env.clone(),
            rng: RngState {
                seed: self.config.seed,
                next_seq: self.next_seq,
            },
            pending: self.queue.pending(),
        }
    }

    pub fn checkpoint(&self, path: &Path) -> Result<(), SimulationError> {
        write_checkpoint(path, &self.snapshot())?;
        Ok(())
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agent(&self, id: AgentId) -> Option<&Agent> {
        environment::find_agent(&self.agents, id)
    }

    pub fn env(&self) -> &EnvironmentState {
        &self.env
    }

    /// Rounds completed so far.
    pub fn round(&self) -> u64 {
        self.env.round
    }

    pub fn scenario(&self) -> &dyn Scenario {
        self.scenario.as_ref()
    }

    /// Shared handle for submitting interventions from other threads.
    pub fn queue(&self) -> Arc<InterventionQueue> {
        Arc::clone(&self.queue)
    }

    pub fn backend(&self) -> Arc<dyn ChatBackend> {
        self.gateway.clone()
    }

    pub fn set_backend(&mut self, backend: Arc<dyn ChatBackend>) {
        self.gateway = Arc::new(Gateway::new(backend, self.config.retry));
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.gateway.metrics()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn interview(&self, id: AgentId, question: &str) -> Result<InterviewExchange, SimulationError> {
        Ok(environment::interview(
            &self.agents,
            id,
            question,
            self.gateway.as_ref(),
            &self.config.prompt_template,
            self.env.round,
        )?)
    }

    pub fn search(&self, query: &str) -> Vec<&AgentProfile> {
        environment::search_agents(&self.agents, query)
    }

    fn lanes(&self) -> usize {
        let cap = self.gateway.concurrency().unwrap_or(usize::MAX);
        self.config.workers.min(cap).max(1)
    }

    /// Execute one round. On abort (more than half the tasks failed) no state
    /// changes and the due interventions go back to the queue.
    pub fn run_round(&mut self) -> Result<RoundOutcome, SimulationError> {
        let started = Instant::now();
        let round = self.env.round;
        let seed = self.config.seed;
        let due = self.queue.take_due(round);
        let mut env = self.env.clone();
        env.apply(&due);
        let env_view = env.view();

        let tasks = self.scenario.plan(round, &self.agents);
        let lanes = self.lanes();
        let template = &self.config.prompt_template;
        let agents = &self.agents;
        let scenario = self.scenario.as_ref();
        let backend: &dyn ChatBackend = self.gateway.as_ref();

        let results: Vec<Result<TaskResult, SimulationError>> =
            parallel_map(&tasks, lanes, |_, task| match task {
                Task::Act {
                    agent,
                    instruction,
                    view,
                } => {
                    let a = &agents[*agent];
                    let memories = a.recall(instruction, round);
                    let full_view = if env_view.is_empty() {
                        view.clone()
                    } else {
                        format!("{env_view}\n{view}")
                    };
                    let q = render_prompt(template, &a.profile, &memories, &full_view, instruction)?;
                    let request =
                        ChatRequest::user(q.clone()).with_seed(derive_key(&[seed, round, a.id().0, 0]));
                    let (event, parsed) = match backend.complete(&request) {
                        Ok(resp) => {
                            let parsed = scenario.parse(a.id(), &resp.content);
                            let event = Pending {
                                agent_id: a.id(),
                                slot: 0,
                                q,
                                a: resp.content,
                                parsed: parsed.value.clone(),
                                latency: resp.latency,
                                error: None,
                            };
                            (event, Some(parsed))
                        }
                        Err(e) => (
                            Pending {
                                agent_id: a.id(),
                                slot: 0,
                                q,
                                a: String::new(),
                                parsed: serde_json::Value::Null,
                                latency: Duration::ZERO,
                                error: Some(e.to_string()),
                            },
                            None,
                        ),
                    };
                    Ok(TaskResult::Act {
                        event,
                        action: ResolvedAction {
                            agent_id: a.id(),
                            parsed,
                        },
                    })
                }
                Task::Dialogue {
                    members,
                    topic,
                    max_turns,
                } => {
                    let mut group: Vec<Agent> = members.iter().map(|i| agents[*i].clone()).collect();
                    let names = speaker_names(&group);
                    let ids: Vec<AgentId> = group.iter().map(Agent::id).collect();
                    let ctx = DialogueContext {
                        template,
                        round,
                        seed: derive_key(&[seed, round, ids[0].0, 1]),
                        env_view: &env_view,
                    };
                    let run = run_agent_mode(&mut group, topic, *max_turns, backend, &ctx)?;
                    let mut events = Vec::with_capacity(run.prompts.len());
                    for (t, turn) in run.transcript.turns.iter().enumerate() {
                        let who = names.iter().position(|n| *n == turn.speaker).expect("speaker is a member");
                        events.push(Pending {
                            agent_id: ids[who],
                            slot: t,
                            q: run.prompts[t].clone(),
                            a: turn.content.clone(),
                            parsed: serde_json::json!({
                                "speaker": turn.speaker,
                                "turn": t,
                                "utterance": turn.content,
                            }),
                            latency: run.latencies[t],
                            error: None,
                        });
                    }
                    let failed = run.error.is_some();
                    if let Some(e) = &run.error {
                        let t = run.transcript.turns.len();
                        events.push(Pending {
                            agent_id: ids[t % ids.len()],
                            slot: t,
                            q: run.prompts[t].clone(),
                            a: String::new(),
                            parsed: serde_json::Value::Null,
                            latency: Duration::ZERO,
                            error: Some(e.to_string()),
                        });
                    }
                    Ok(TaskResult::Dialogue {
                        members: members.clone(),
                        agents: group,
                        events,
                        outcome: DialogueOutcome {
                            members: ids,
                            transcript: run.transcript,
                        },
                        failed,
                    })
                }
            });

        let total = results.len();
        let mut done = Vec::with_capacity(total);
        for r in results {
            match r {
                Ok(t) => done.push(t),
                Err(e) => {
                    self.queue.restore_front(due);
                    return Err(e);
                }
            }
        }
        let failed = done
            .iter()
            .filter(|t| match t {
                TaskResult::Act { action, .. } => action.parsed.is_none(),
                TaskResult::Dialogue { failed, .. } => *failed,
            })
            .count();
        if total > 0 && failed * 2 > total {
            self.queue.restore_front(due);
            return Err(SimulationError::RoundAborted { round, failed, total });
        }

        // Barrier: everything below is single-threaded and in agent id order.
        let mut pending_events = Vec::new();
        let mut actions = Vec::new();
        let mut dialogues = Vec::new();
        let mut errors = 0;
        for t in done {
            match t {
                TaskResult::Act { event, action, .. } => {
                    errors += usize::from(event.error.is_some());
                    pending_events.push(event);
                    actions.push(action);
                }
                TaskResult::Dialogue {
                    members,
                    agents,
                    events,
                    outcome,
                    failed,
                } => {
                    errors += usize::from(failed);
                    for (idx, updated) in members.into_iter().zip(agents) {
                        self.agents[idx] = updated;
                    }
                    pending_events.extend(events);
                    dialogues.push(outcome);
                }
            }
        }
        actions.sort_by_key(|a| a.agent_id);
        dialogues.sort_by_key(|d| d.members.first().copied());
        let resolution = self.scenario.resolve(round, &actions, &dialogues);
        for (id, record) in resolution.memories {
            let idx = self
                .agents
                .binary_search_by_key(&id, Agent::id)
                .map_err(|_| EnvironmentError::AgentNotFound(id))?;
            self.agents[idx].memory.append(record, round)?;
        }
        errors += self.reflect_all(round, lanes);

        pending_events.sort_by_key(|e| (e.agent_id, e.slot));
        let events: Vec<ActionEvent> = pending_events
            .into_iter()
            .map(|p| {
                let seq = self.next_seq;
                self.next_seq += 1;
                ActionEvent {
                    seq,
                    round,
                    agent_id: p.agent_id,
                    q: p.q,
                    a: p.a,
                    parsed: p.parsed,
                    latency_ms: p.latency.as_secs_f64() * 1000.0,
                    error: p.error,
                }
            })
            .collect();

        env.broadcasts.clear();
        env.scenario_state = self.scenario.state();
        env.round = round + 1;
        self.env = env;
        self.queue.set_round(self.env.round);
        Ok(RoundOutcome {
            report: RoundReport {
                round,
                events: events.len(),
                wall_time: started.elapsed(),
                errors,
                fallbacks: resolution.fallbacks,
            },
            events,
        })
    }

    /// Reflection for every agent whose gate opened this round. Calls run in
    /// parallel; results are applied in id order. Returns the failure count.
    fn reflect_all(&mut self, round: u64, lanes: usize) -> usize {
        let seed = self.config.seed;
        let requests: Vec<(usize, ChatRequest)> = self
            .agents
            .iter()
            .enumerate()
            .filter_map(|(i, a)| {
                a.reflection_request(round, derive_key(&[seed, round, a.id().0, 0x7ef1]))
                    .map(|r| (i, r))
            })
            .collect();
        if requests.is_empty() {
            return 0;
        }
        let backend: &dyn ChatBackend = self.gateway.as_ref();
        let replies = parallel_map(&requests, lanes, |_, (_, req)| backend.complete(req));
        let mut failures = 0;
        for ((idx, _), reply) in requests.iter().zip(replies) {
            match reply {
                Ok(r) => {
                    self.agents[*idx].apply_reflection(r.content, round);
                }
                Err(_) => failures += 1,
            }
        }
        failures
    }
}

/// Writes events as JSON lines, flushing after each round.
pub struct EventLogWriter<W: Write> {
    out: BufWriter<W>,
}

impl EventLogWriter<std::fs::File> {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(std::fs::File::create(path)?))
    }
}

impl<W: Write> EventLogWriter<W> {
    pub fn new(out: W) -> Self {
        EventLogWriter {
            out: BufWriter::new(out),
        }
    }

    pub fn write_round(&mut self, events: &[ActionEvent]) -> std::io::Result<()> {
        for e in events {
            serde_json::to_writer(&mut self.out, e)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()
    }
}

pub fn to_jsonl(events: &[ActionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_json_line());
        out.push('\n');
    }
    out
}

pub fn parse_event_log(text: &str) -> Result<Vec<ActionEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub struct RunOutput {
    pub simulation: Simulation,
    pub events: Vec<ActionEvent>,
    pub reports: Vec<RoundReport>,
}

/// Run up to `rounds` rounds, checking `stop` before each one.
pub fn run_with<F>(
    sim: &mut Simulation,
    rounds: u64,
    stop: &StopHandle,
    mut on_round: F,
) -> Result<Vec<RoundReport>, SimulationError>
where
    F: FnMut(&RoundOutcome) -> Result<(), SimulationError>,
{
    let mut reports = Vec::new();
    for _ in 0..rounds {
        if stop.is_stopped() {
            break;
        }
        let outcome = sim.run_round()?;
        tracing::debug!(
            round = outcome.report.round,
            events = outcome.report.events,
            errors = outcome.report.errors,
            "round complete"
        );
        on_round(&outcome)?;
        reports.push(outcome.report);
    }
    Ok(reports)
}

/// Build a simulation and run `config.rounds` rounds.
pub fn run(config: SimulationConfig) -> Result<RunOutput, SimulationError> {
    let rounds = config.rounds;
    let mut simulation = Simulation::new(config)?;
    let mut events = Vec::new();
    let reports = run_with(&mut simulation, rounds, &StopHandle::new(), |o| {
        events.extend(o.events.iter().cloned());
        Ok(())
    })?;
    Ok(RunOutput {
        simulation,
        events,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendKind, ScriptedBackend};

    fn config(scenario: &str, n: usize, rounds: u64) -> SimulationConfig {
        SimulationConfig::new(
            scenario,
            n,
            rounds,
            11,
            BackendKind::MockDeterministic {
                seed: 3,
                latency: Default::default(),
            },
        )
    }

    #[test]
    fn three_agents_three_events_in_id_order() {
        let mut sim = Simulation::new(config("job_market", 3, 1)).unwrap();
        let out = sim.run_round().unwrap();
        assert_eq!(out.events.len(), 3);
        let ids: Vec<u64> = out.events.iter().map(|e| e.agent_id.0).collect();
        assert_eq!(ids, [1, 2, 3]);
        let seqs: Vec<u64> = out.events.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, [1, 2, 3]);
        assert_eq!(sim.round(), 1);
    }

    #[test]
    fn event_count_over_rounds() {
        let out = run(config("recommender", 2, 3)).unwrap();
        assert_eq!(out.events.len(), 6);
        assert_eq!(out.reports.len(), 3);
        assert!(out.events.windows(2).all(|w| w[0].seq < w[1].seq));
        assert!(out.events.windows(2).all(|w| w[0].round <= w[1].round));
    }

    #[test]
    fn all_failures_abort_without_state_change() {
        let mut sim = Simulation::with_backend(
            config("job_market", 3, 1),
            Arc::new(ScriptedBackend::new(vec![])),
        )
        .unwrap();
        let before = sim.snapshot();
        let err = sim.run_round().unwrap_err();
        assert!(matches!(err, SimulationError::RoundAborted { failed: 3, total: 3, .. }));
        assert_eq!(sim.snapshot(), before);
    }

    #[test]
    fn minority_failures_become_error_events() {
        let script = vec![Ok("apply: 1".to_owned()), Err(GatewayError::Terminal {
            endpoint: "s".into(),
            message: "boom".into(),
        }), Ok("apply: none".to_owned())];
        let mut sim = Simulation::with_backend(
            SimulationConfig {
                retry: crate::gateway::RetryPolicy {
                    budget: 0,
                    base_delay_ms: 0,
                },
                ..config("job_market", 3, 1)
            },
            Arc::new(ScriptedBackend::new(script)),
        )
        .unwrap();
        let out = sim.run_round().unwrap();
        assert_eq!(out.report.errors, 1);
        assert_eq!(out.events.iter().filter(|e| e.error.is_some()).count(), 1);
    }

    #[test]
    fn stop_before_start_runs_nothing() {
        let mut sim = Simulation::new(config("job_market", 2, 5)).unwrap();
        let stop = StopHandle::new();
        stop.stop();
        let reports = run_with(&mut sim, 5, &stop, |_| Ok(())).unwrap();
        assert!(reports.is_empty());
        assert_eq!(sim.round(), 0);
    }

    #[test]
    fn stop_during_round_ends_at_boundary() {
        let mut sim = Simulation::new(config("job_market", 2, 10)).unwrap();
        let stop = StopHandle::new();
        let s = stop.clone();
        let reports = run_with(&mut sim, 10, &stop, |o| {
            if o.report.round == 1 {
                s.stop();
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(sim.round(), 2);
    }

    #[test]
    fn discussion_round_emits_turn_events() {
        let mut c = config("group_discussion", 2, 1);
        c.scenario_params = serde_json::json!({"group_size": 2, "max_turns": 4});
        let mut sim = Simulation::new(c).unwrap();
        let out = sim.run_round().unwrap();
        assert_eq!(out.events.len(), 4);
        // Two turns each, grouped by speaker id.
        let ids: Vec<u64> = out.events.iter().map(|e| e.agent_id.0).collect();
        assert_eq!(ids, [1, 1, 2, 2]);
        let turns: Vec<u64> = out.events.iter().map(|e| e.parsed["turn"].as_u64().unwrap()).collect();
        assert_eq!(turns, [0, 2, 1, 3]);
        assert_eq!(sim.agents()[0].memory.long_term().len(), 2);
    }
}
