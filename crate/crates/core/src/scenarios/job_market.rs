use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    base_profile, read_jsonl, DialogueOutcome, ParsedAction, Resolution, ResolvedAction, Scenario,
    ScenarioError, Task,
};
use crate::agent::{Agent, AgentId, AgentProfile, MemoryRecord};

pub const JOB_INSTRUCTION: &str = "You are looking for a job. Choose at most one of the open \
postings above. Reply with `apply: <posting id>` or `apply: none`.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobPosting {
    pub id: u64,
    pub title: String,
    pub required_skill: String,
    /// Hires per round.
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JobMarketParams {
    pub postings: usize,
    pub capacity: usize,
    pub postings_path: Option<PathBuf>,
}

impl Default for JobMarketParams {
    fn default() -> Self {
        JobMarketParams {
            postings: 5,
            capacity: 2,
            postings_path: None,
        }
    }
}

const TRADES: [(&str, &str); 8] = [
    ("Nurse", "nursing"),
    ("Teacher", "teaching"),
    ("Accountant", "accounting"),
    ("Software Developer", "programming"),
    ("Chef", "cooking"),
    ("Delivery Driver", "driving"),
    ("Sales Associate", "sales"),
    ("Carpenter", "carpentry"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct MarketState {
    /// Agent id -> posting id.
    employed: BTreeMap<AgentId, u64>,
    hires: u64,
    applications: u64,
    no_application: u64,
    invalid_choices: u64,
}

pub struct JobMarket {
    postings: Vec<JobPosting>,
    state: MarketState,
}

fn apply_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)apply:\s*(\d+|none)").unwrap())
}

/// Format-validity check used by rule-based judges: `a` applies to a posting
/// id that `q` offered as `option:<id>`.
pub fn job_action_is_valid(q: &str, a: &str) -> bool {
    let Some(cap) = apply_re().captures(a) else {
        return false;
    };
    let Ok(id) = cap[1].parse::<u64>() else {
        return false;
    };
    let marker = format!("option:{id} ");
    q.lines().any(|l| l.trim_start().starts_with(&marker))
}

impl JobMarket {
    pub fn new(params: JobMarketParams, seed: u64) -> Result<Self, ScenarioError> {
        let postings = match &params.postings_path {
            Some(p) => read_jsonl::<JobPosting>(p)?,
            None => {
                if params.postings == 0 {
                    return Err(ScenarioError::param("postings", "must be >= 1"));
                }
                (0..params.postings)
                    .map(|i| {
                        let (title, skill) = TRADES[(i + seed as usize % TRADES.len()) % TRADES.len()];
                        JobPosting {
                            id: i as u64 + 1,
                            title: title.to_owned(),
                            required_skill: skill.to_owned(),
                            capacity: params.capacity,
                        }
                    })
                    .collect()
            }
        };
        if postings.is_empty() {
            return Err(ScenarioError::param("postings", "at least one posting is required"));
        }
        if let Some(p) = postings.iter().find(|p| p.capacity == 0) {
            return Err(ScenarioError::param(
                "capacity",
                format!("posting {} has capacity 0", p.id),
            ));
        }
        Ok(JobMarket {
            postings,
            state: MarketState::default(),
        })
    }

    pub fn postings(&self) -> &[JobPosting] {
        &self.postings
    }

    pub fn employer(&self, agent: AgentId) -> Option<u64> {
        self.state.employed.get(&agent).copied()
    }

    pub fn invalid_choices(&self) -> u64 {
        self.state.invalid_choices
    }

    fn view(&self) -> String {
        let mut v = String::from("Open job postings:\n");
        for p in &self.postings {
            v.push_str(&format!(
                "option:{} {} (requires {}, {} opening(s) this round)\n",
                p.id, p.title, p.required_skill, p.capacity
            ));
        }
        v
    }

    fn posting(&self, id: u64) -> Option<&JobPosting> {
        self.postings.iter().find(|p| p.id == id)
    }
}

impl Scenario for JobMarket {
    fn name(&self) -> &'static str {
        "job_market"
    }

    fn generate_profile(&self, id: AgentId, rng: &mut ChaCha8Rng) -> AgentProfile {
        let (_, skill) = TRADES[rng.random_range(0..TRADES.len())];
        base_profile(id, rng)
            .with_public("skill", skill)
            .with_public("years_experience", rng.random_range(0..30u32).to_string())
    }

    fn plan(&self, _round: u64, agents: &[Agent]) -> Vec<Task> {
        let view = self.view();
        agents
            .iter()
            .enumerate()
            .filter(|(_, a)| !self.state.employed.contains_key(&a.id()))
            .map(|(i, _)| Task::Act {
                agent: i,
                instruction: JOB_INSTRUCTION.to_owned(),
                view: view.clone(),
            })
            .collect()
    }

    fn parse(&self, _agent: AgentId, raw: &str) -> ParsedAction {
        let Some(cap) = apply_re().captures(raw) else {
            return ParsedAction {
                value: json!({"action": "none"}),
                fallback: true,
            };
        };
        let choice = cap[1].to_ascii_lowercase();
        if choice == "none" {
            return ParsedAction {
                value: json!({"action": "none"}),
                fallback: false,
            };
        }
        match choice.parse::<u64>().ok().filter(|id| self.posting(*id).is_some()) {
            Some(id) => ParsedAction {
                value: json!({"action": "apply", "posting": id}),
                fallback: false,
            },
            None => ParsedAction {
                value: json!({"action": "none", "invalid_choice": choice}),
                fallback: true,
            },
        }
    }

    fn resolve(
        &mut self,
        round: u64,
        actions: &[ResolvedAction],
        _dialogues: &[DialogueOutcome],
    ) -> Resolution {
        let mut remaining: BTreeMap<u64, usize> =
            self.postings.iter().map(|p| (p.id, p.capacity)).collect();
        let mut res = Resolution::default();
        for action in actions {
            let Some(parsed) = &action.parsed else {
                continue;
            };
            if parsed.fallback {
                res.fallbacks += 1;
                self.state.invalid_choices += 1;
            }
            let posting = parsed.value.get("posting").and_then(|v| v.as_u64());
            let memory = match posting {
                Some(pid) => {
                    self.state.applications += 1;
                    let title = self.posting(pid).map(|p| p.title.clone()).unwrap_or_default();
                    let slot = remaining.get_mut(&pid).expect("parse only accepts known ids");
                    if *slot > 0 {
                        *slot -= 1;
                        self.state.employed.insert(action.agent_id, pid);
                        self.state.hires += 1;
                        MemoryRecord::observation(format!("round {round}: hired as {title}"), round, 0.8)
                    } else {
                        MemoryRecord::observation(
                            format!("round {round}: applied for {title} but was not hired"),
                            round,
                            0.5,
                        )
                    }
                }
                None => {
                    self.state.no_application += 1;
                    MemoryRecord::observation(
                        format!("round {round}: did not apply for any job"),
                        round,
                        0.3,
                    )
                }
            };
            res.memories.push((action.agent_id, memory));
        }
        res
    }

    fn state(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("market state serializes")
    }

    fn load_state(&mut self, state: &serde_json::Value) -> Result<(), ScenarioError> {
        if state.is_null() {
            self.state = MarketState::default();
            return Ok(());
        }
        self.state =
            serde_json::from_value(state.clone()).map_err(|e| ScenarioError::State(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn market(capacity: usize) -> JobMarket {
        JobMarket::new(
            JobMarketParams {
                postings: 1,
                capacity,
                postings_path: None,
            },
            0,
        )
        .unwrap()
    }

    fn apply(m: &JobMarket, id: u64, raw: &str) -> ResolvedAction {
        ResolvedAction {
            agent_id: AgentId(id),
            parsed: Some(m.parse(AgentId(id), raw)),
        }
    }

    #[test]
    fn resolution_in_agent_id_order() {
        let mut m = market(1);
        let actions = vec![apply(&m, 3, "apply: 1"), apply(&m, 7, "apply: 1")];
        let res = m.resolve(0, &actions, &[]);
        assert_eq!(m.employer(AgentId(3)), Some(1));
        assert_eq!(m.employer(AgentId(7)), None);
        let hired: Vec<_> = res
            .memories
            .iter()
            .filter(|(_, r)| r.content.contains("hired as"))
            .collect();
        assert_eq!(hired.len(), 1);
        assert_eq!(hired[0].0, AgentId(3));
    }

    #[test]
    fn no_applicants_no_hires() {
        let mut m = market(1);
        let res = m.resolve(0, &[], &[]);
        assert!(res.memories.is_empty());
        assert!(m.state.employed.is_empty());
    }

    #[test]
    fn invalid_posting_falls_back() {
        let mut m = market(1);
        let a = apply(&m, 1, "apply: 99");
        assert!(a.parsed.as_ref().unwrap().fallback);
        let res = m.resolve(0, &[a], &[]);
        assert_eq!(res.fallbacks, 1);
        assert_eq!(m.invalid_choices(), 1);
        assert!(m.state.employed.is_empty());
    }

    #[test]
    fn explicit_none_is_not_a_fallback() {
        let m = market(1);
        let p = m.parse(AgentId(1), "I'll wait. Apply: NONE");
        assert!(!p.fallback);
        assert_eq!(p.value["action"], "none");
    }

    #[test]
    fn employed_agents_do_not_act() {
        let mut m = market(5);
        let agents: Vec<Agent> = (1..=3)
            .map(|i| Agent::new(AgentProfile::new(AgentId(i), "x"), Default::default()))
            .collect();
        let a = apply(&m, 2, "apply: 1");
        m.resolve(0, &[a], &[]);
        let tasks = m.plan(1, &agents);
        assert_eq!(tasks.len(), 2);
    }

    #[test]
    fn validity_oracle() {
        let q = "Open job postings:\noption:1 Nurse\noption:2 Chef\n";
        assert!(job_action_is_valid(q, "apply: 2"));
        assert!(!job_action_is_valid(q, "apply: 3"));
        assert!(!job_action_is_valid(q, "apply: none"));
        assert!(!job_action_is_valid(q, "no idea"));
        assert!(!job_action_is_valid("option:12 X", "apply: 1"));
    }

    proptest! {
        #[test]
        fn parse_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let m = market(1);
            let raw = String::from_utf8_lossy(&bytes);
            let _ = m.parse(AgentId(1), &raw);
        }

        #[test]
        fn hires_never_exceed_capacity(cap in 1usize..4, n in 0u64..30, picks in proptest::collection::vec(0u64..4, 30)) {
            let mut m = JobMarket::new(JobMarketParams { postings: 3, capacity: cap, postings_path: None }, 0).unwrap();
            let actions: Vec<_> = (0..n).map(|i| apply(&m, i, &format!("apply: {}", picks[i as usize]))).collect();
            m.resolve(0, &actions, &[]);
            for p in 1..=3u64 {
                let hired = m.state.employed.values().filter(|v| **v == p).count();
                prop_assert!(hired <= cap);
            }
        }
    }
}
