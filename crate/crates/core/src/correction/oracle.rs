//! Rule-based stand-ins for the judge, the reviser and a noisy agent model,
//! used to test the correction loop against known ground truth.

use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;

use crate::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::scenarios::job_action_is_valid;
use crate::text::{derive_key, estimate_tokens, keyed_unit};

fn reply(id: &str, content: String) -> ChatResponse {
    ChatResponse {
        token_estimate: estimate_tokens(&content),
        content,
        latency: Duration::ZERO,
        backend_id: id.to_owned(),
    }
}

fn option_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*option:(\d+)").unwrap())
}

fn options(prompt: &str) -> Vec<u64> {
    option_re()
        .captures_iter(prompt)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

/// Recover `(q, a)` from a prompt rendered with the default rubric.
pub fn extract_judged_pair(prompt: &str) -> Option<(&str, &str)> {
    let start = prompt.find("<<<PROMPT\n")? + "<<<PROMPT\n".len();
    let mid = prompt[start..].rfind("\nPROMPT>>>\n<<<ACTION\n")? + start;
    let a_start = mid + "\nPROMPT>>>\n<<<ACTION\n".len();
    let a_end = prompt[a_start..].rfind("\nACTION>>>")? + a_start;
    Some((&prompt[start..mid], &prompt[a_start..a_end]))
}

type Validator = Box<dyn Fn(&str, &str) -> bool + Send + Sync>;

/// Scores 10 when the validator accepts `(q, a)` and 0 otherwise.
pub struct OracleJudge {
    validator: Validator,
}

impl OracleJudge {
    pub fn new(validator: impl Fn(&str, &str) -> bool + Send + Sync + 'static) -> Self {
        OracleJudge {
            validator: Box::new(validator),
        }
    }

    /// Valid means applying to a posting that the prompt offered.
    pub fn job_market() -> Self {
        Self::new(job_action_is_valid)
    }
}

impl ChatBackend for OracleJudge {
    fn id(&self) -> &str {
        "oracle-judge"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let prompt = request.prompt_text();
        let content = match extract_judged_pair(&prompt) {
            Some((q, a)) if (self.validator)(q, a) => "Score: 10".to_owned(),
            Some(_) => "Score: 0".to_owned(),
            None => "cannot find the prompt and action".to_owned(),
        };
        Ok(reply(self.id(), content))
    }
}

/// Revises job-market actions to apply to the first posting offered.
pub struct OracleReviser;

impl ChatBackend for OracleReviser {
    fn id(&self) -> &str {
        "oracle-reviser"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let prompt = request.prompt_text();
        let content = extract_judged_pair(&prompt)
            .and_then(|(q, _)| options(q).first().copied())
            .map_or_else(|| "apply: none".to_owned(), |id| format!("apply: {id}"));
        Ok(reply(self.id(), content))
    }
}

/// A job-market agent model that picks a valid posting with probability
/// `p_valid` and otherwise answers with an unknown posting id or no choice.
/// Decisions are keyed by the request, so replays are reproducible.
pub struct NoisyJobBackend {
    seed: u64,
    p_valid: f64,
}

impl NoisyJobBackend {
    pub fn new(seed: u64, p_valid: f64) -> Self {
        NoisyJobBackend { seed, p_valid }
    }
}

impl ChatBackend for NoisyJobBackend {
    fn id(&self) -> &str {
        "noisy-job-agent"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let key = derive_key(&[self.seed, request.stable_hash()]);
        let opts = options(&request.prompt_text());
        let content = if opts.is_empty() {
            "I have nothing to add.".to_owned()
        } else if keyed_unit(&[key, 1]) < self.p_valid {
            format!("apply: {}", opts[(key % opts.len() as u64) as usize])
        } else if key.is_multiple_of(2) {
            format!("apply: {}", opts.iter().max().unwrap() + 100)
        } else {
            "I am still thinking about which job suits me.".to_owned()
        };
        Ok(reply(self.id(), content))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::{judge_revise, judge_score, test_event, Judge, JudgeMode};
    use std::sync::Arc;

    const Q: &str = "Open job postings:\noption:4 Nurse (requires nursing)\noption:9 Chef\nReply with apply";

    #[test]
    fn oracle_judge_agrees_with_validator() {
        let judge = Judge::new(Arc::new(OracleJudge::job_market()), JudgeMode::Score);
        for (i, a) in ["apply: 4", "apply: 9", "apply: 5", "hmm", "apply: none"].iter().enumerate() {
            let e = test_event(i as u64, Q, a);
            let s = judge_score(&e, &judge).unwrap().s;
            assert_eq!(s, if job_action_is_valid(Q, a) { 10.0 } else { 0.0 }, "{a}");
        }
    }

    #[test]
    fn reviser_fixes_invalid_actions() {
        let judge = Judge::new(Arc::new(OracleReviser), JudgeMode::Revise);
        let e = test_event(1, Q, "apply: 77");
        let r = judge_revise(&e, &judge).unwrap();
        assert_eq!(r.a_prime, "apply: 4");
        assert!(job_action_is_valid(Q, &r.a_prime));
    }

    #[test]
    fn extraction_survives_multiline_text() {
        let p = "<<<PROMPT\nline1\nline2\nPROMPT>>>\n<<<ACTION\nx\ny\nACTION>>>\ntrailer";
        assert_eq!(extract_judged_pair(p), Some(("line1\nline2", "x\ny")));
    }

    #[test]
    fn noisy_backend_hits_target_rate() {
        let b = NoisyJobBackend::new(5, 0.5);
        let valid = (0..2000)
            .filter(|i| {
                let q = format!("{Q}\nagent {i}");
                let a = b.complete(&ChatRequest::user(q.clone())).unwrap().content;
                job_action_is_valid(&q, &a)
            })
            .count();
        assert!((900..1100).contains(&valid), "{valid}");
    }
}
