use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CorrectionError, FeedbackSource, RevisionFeedback, ScoreFeedback};
use crate::gateway::{BackendKind, ChatBackend, ChatRequest, GatewayError};
use crate::scheduler::ActionEvent;
use crate::text::derive_key;

/// The judge sees the prompt and the action between marker lines so that
/// rule-based judges can recover both verbatim.
pub const DEFAULT_RUBRIC: &str = "You are reviewing one step of a social simulation. \
An agent was given the prompt below and produced the action below.\n\
<<<PROMPT\n{q}\nPROMPT>>>\n\
<<<ACTION\n{a}\nACTION>>>\n\
Judge whether the action is a reasonable, well-formed response to the prompt.";

const SCORE_SUFFIX: &str = "\nReply with `Score: <number>` where the number is between 0 and 10.";
const REVISE_SUFFIX: &str =
    "\nReply with a corrected action only, in exactly the format the prompt asks for.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    Score,
    Revise,
}

/// A judge prompt with `{q}` and `{a}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rubric(String);

impl Rubric {
    pub fn new(text: impl Into<String>) -> Result<Self, CorrectionError> {
        let text = text.into();
        if !text.contains("{q}") || !text.contains("{a}") {
            return Err(CorrectionError::Rubric);
        }
        Ok(Rubric(text))
    }

    /// Single-pass substitution: placeholder text inside `q` or `a` is left alone.
    pub fn render(&self, q: &str, a: &str) -> String {
        let mut out = String::with_capacity(self.0.len() + q.len() + a.len());
        let mut rest = self.0.as_str();
        while let Some(pos) = rest.find('{') {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if let Some(r) = tail.strip_prefix("{q}") {
                out.push_str(q);
                rest = r;
            } else if let Some(r) = tail.strip_prefix("{a}") {
                out.push_str(a);
                rest = r;
            } else {
                out.push('{');
                rest = &tail[1..];
            }
        }
        out.push_str(rest);
        out
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for Rubric {
    fn default() -> Self {
        Rubric(DEFAULT_RUBRIC.to_owned())
    }
}

impl TryFrom<String> for Rubric {
    type Error = CorrectionError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Rubric::new(s)
    }
}

impl From<Rubric> for String {
    fn from(r: Rubric) -> String {
        r.0
    }
}

/// Judge settings as they appear in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub backend: BackendKind,
    #[serde(default)]
    pub rubric: Rubric,
    pub mode: JudgeMode,
}

impl JudgeConfig {
    pub fn build(&self) -> Result<Judge, GatewayError> {
        Ok(Judge::new(self.backend.build()?, self.mode).with_rubric(self.rubric.clone()))
    }
}

/// A judge ready to call.
#[derive(Clone)]
pub struct Judge {
    pub backend: Arc<dyn ChatBackend>,
    pub rubric: Rubric,
    pub mode: JudgeMode,
    pub source: FeedbackSource,
}

impl Judge {
    pub fn new(backend: Arc<dyn ChatBackend>, mode: JudgeMode) -> Self {
        Judge {
            backend,
            rubric: Rubric::default(),
            mode,
            source: FeedbackSource::Judge,
        }
    }

    pub fn with_rubric(mut self, rubric: Rubric) -> Self {
        self.rubric = rubric;
        self
    }

    pub fn with_source(mut self, source: FeedbackSource) -> Self {
        self.source = source;
        self
    }

    fn request(&self, event: &ActionEvent) -> ChatRequest {
        let mut prompt = self.rubric.render(&event.q, &event.a);
        prompt.push_str(match self.mode {
            JudgeMode::Score => SCORE_SUFFIX,
            JudgeMode::Revise => REVISE_SUFFIX,
        });
        let mut req = ChatRequest::user(prompt).with_seed(derive_key(&[event.seq, 0x1d6e]));
        req.temperature = 0.0;
        req
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap())
}

/// The first number in `reply` that lies in [0, 10].
pub fn parse_score(reply: &str) -> Option<f64> {
    number_re()
        .find_iter(reply)
        .filter_map(|m| m.as_str().parse::<f64>().ok())
        .find(|x| (0.0..=10.0).contains(x))
}

/// Score one event with one judge call.
pub fn judge_score(event: &ActionEvent, judge: &Judge) -> Result<ScoreFeedback, CorrectionError> {
    if judge.mode != JudgeMode::Score {
        return Err(CorrectionError::WrongMode {
            expected: JudgeMode::Score,
        });
    }
    let reply = judge.backend.complete(&judge.request(event))?;
    let s = parse_score(&reply.content).ok_or(CorrectionError::JudgeFormat {
        reply: reply.content.clone(),
    })?;
    ScoreFeedback::new(event, s, judge.source)
}

/// Ask the judge for a corrected answer; the full reply becomes `a'`.
pub fn judge_revise(event: &ActionEvent, judge: &Judge) -> Result<RevisionFeedback, CorrectionError> {
    if judge.mode != JudgeMode::Revise {
        return Err(CorrectionError::WrongMode {
            expected: JudgeMode::Revise,
        });
    }
    let reply = judge.backend.complete(&judge.request(event))?;
    RevisionFeedback::new(event, reply.content, judge.source)
}
