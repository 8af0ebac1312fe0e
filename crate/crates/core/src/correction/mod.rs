//! Feedback on simulated (q, a) pairs and the loop that feeds it back.
//!
//! Scores `(q, a, s)` and revisions `(q, a')` come from a judge backend or a
//! human. They can be exported as fine-tuning datasets or applied directly
//! through [`RevisionAdapter`], which replays revised answers for prompts
//! that resemble revised ones.

mod adapter;
mod cycle;
mod evaluate;
mod export;
mod finetune;
mod judge;
mod oracle;

pub use adapter::{RevisionAdapter, DEFAULT_SIMILARITY_THRESHOLD};
pub use cycle::{replay_with_feedback, run_with_feedback, CorrectionLoop, Improvement};
pub use evaluate::{evaluate_rounds, sample_round, RoundScore};
pub use export::{
    export_reward_dataset, export_sft_dataset, read_reward_dataset, read_sft_dataset, RewardRecord,
    SftRecord,
};
pub use finetune::{trigger_external_finetune, FinetuneMethod};
pub use judge::{
    judge_revise, judge_score, parse_score, Judge, JudgeConfig, JudgeMode, Rubric, DEFAULT_RUBRIC,
};
pub use oracle::{extract_judged_pair, NoisyJobBackend, OracleJudge, OracleReviser};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::scheduler::{ActionEvent, SimulationError};

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("judge reply has no score in [0, 10]: {reply:?}")]
    JudgeFormat { reply: String },
    #[error("revision is identical to the original answer")]
    NoOpRevision,
    #[error("score {0} is outside [0, 10]")]
    ScoreRange(f64),
    #[error("revision text is empty")]
    EmptyRevision,
    #[error("judge is configured for {expected:?} mode")]
    WrongMode { expected: JudgeMode },
    #[error("rubric must contain both {{q}} and {{a}} placeholders")]
    Rubric,
    #[error("nothing to export")]
    EmptyExport,
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Judge,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFeedback {
    pub event_seq: u64,
    pub q: String,
    pub a: String,
    pub s: f64,
    pub source: FeedbackSource,
}

impl ScoreFeedback {
    pub fn new(event: &ActionEvent, s: f64, source: FeedbackSource) -> Result<Self, CorrectionError> {
        if !(0.0..=10.0).contains(&s) {
            return Err(CorrectionError::ScoreRange(s));
        }
        Ok(ScoreFeedback {
            event_seq: event.seq,
            q: event.q.clone(),
            a: event.a.clone(),
            s,
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionFeedback {
    pub event_seq: u64,
    pub q: String,
    pub a_prime: String,
    pub source: FeedbackSource,
}

impl RevisionFeedback {
    pub fn new(
        event: &ActionEvent,
        a_prime: impl Into<String>,
        source: FeedbackSource,
    ) -> Result<Self, CorrectionError> {
        let a_prime = a_prime.into();
        if a_prime.trim().is_empty() {
            return Err(CorrectionError::EmptyRevision);
        }
        if a_prime == event.a {
            return Err(CorrectionError::NoOpRevision);
        }
        Ok(RevisionFeedback {
            event_seq: event.seq,
            q: event.q.clone(),
            a_prime,
            source,
        })
    }
}

/// Append-only feedback storage, shareable across threads.
#[derive(Debug, Default)]
pub struct FeedbackStore {
    scores: RwLock<Vec<ScoreFeedback>>,
    revisions: RwLock<Vec<RevisionFeedback>>,
}

impl FeedbackStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_score(&self, f: ScoreFeedback) -> Result<(), CorrectionError> {
        if !(0.0..=10.0).contains(&f.s) {
            return Err(CorrectionError::ScoreRange(f.s));
        }
        self.scores.write().push(f);
        Ok(())
    }

    pub fn add_revision(&self, f: RevisionFeedback) -> Result<(), CorrectionError> {
        if f.a_prime.trim().is_empty() {
            return Err(CorrectionError::EmptyRevision);
        }
        self.revisions.write().push(f);
        Ok(())
    }

    pub fn scores(&self) -> Vec<ScoreFeedback> {
        self.scores.read().clone()
    }

    pub fn revisions(&self) -> Vec<RevisionFeedback> {
        self.revisions.read().clone()
    }

    pub fn len(&self) -> (usize, usize) {
        (self.scores.read().len(), self.revisions.read().len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == (0, 0)
    }
}

#[cfg(test)]
pub(crate) fn test_event(seq: u64, q: &str, a: &str) -> ActionEvent {
    ActionEvent {
        seq,
        round: 0,
        agent_id: crate::agent::AgentId(seq),
        q: q.to_owned(),
        a: a.to_owned(),
        parsed: serde_json::Value::Null,
        latency_ms: 0.0,
        error: None,
    }
}
