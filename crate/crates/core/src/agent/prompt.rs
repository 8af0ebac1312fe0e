use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{AgentError, AgentProfile, MemoryRecord};

pub const DEFAULT_AGENT_TEMPLATE: &str = "You are a person with the following profile:\n\
{profile}\n\n\
Relevant memories:\n\
{memories}\n\n\
Current situation:\n\
{environment}\n\n\
{instruction}";

const PLACEHOLDERS: [&str; 5] = [
    "profile",
    "profile.private",
    "memories",
    "environment",
    "instruction",
];

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_.]*)\}").unwrap())
}

/// Prompt text with `{profile}`, `{profile.private}`, `{memories}`,
/// `{environment}` and `{instruction}` placeholders. Other brace groups that do
/// not look like identifiers are kept literally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate(pub String);

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate(DEFAULT_AGENT_TEMPLATE.to_owned())
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, AgentError> {
        let t = PromptTemplate(text.into());
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        for cap in placeholder_re().captures_iter(&self.0) {
            let name = &cap[1];
            if !PLACEHOLDERS.contains(&name) {
                return Err(AgentError::UnboundPlaceholder(name.to_owned()));
            }
        }
        Ok(())
    }
}

/// Render an agent prompt. Pure: equal inputs give equal bytes.
pub fn render_prompt(
    template: &PromptTemplate,
    profile: &AgentProfile,
    memories: &[&MemoryRecord],
    env_view: &str,
    instruction: &str,
) -> Result<String, AgentError> {
    let text = &template.0;
    let mut out = String::with_capacity(text.len() + env_view.len() + instruction.len() + 256);
    let mut last = 0;
    for cap in placeholder_re().captures_iter(text) {
        let whole = cap.get(0).unwrap();
        out.push_str(&text[last..whole.start()]);
        match &cap[1] {
            "profile" => out.push_str(&profile.render_public()),
            "profile.private" => out.push_str(&profile.render_private()),
            "memories" => {
                if memories.is_empty() {
                    out.push_str("(none)");
                }
                for (i, m) in memories.iter().enumerate() {
                    if i > 0 {
                        out.push('\n');
                    }
                    out.push_str("- ");
                    out.push_str(&m.content.replace('\n', " "));
                }
            }
            "environment" => out.push_str(env_view),
            "instruction" => out.push_str(instruction),
            other => return Err(AgentError::UnboundPlaceholder(other.to_owned())),
        }
        last = whole.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}
