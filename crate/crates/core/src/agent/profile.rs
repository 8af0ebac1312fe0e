use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AgentError;

/// Stable 64-bit agent identifier. Ordering drives deterministic scheduling.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct AgentId(pub u64);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Public and private attributes of one simulated person.
///
/// Attribute maps are schemaless so scenarios can add arbitrary keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: AgentId,
    #[serde(rename = "public", default)]
    pub public_attrs: BTreeMap<String, String>,
    #[serde(rename = "private", default)]
    pub private_attrs: BTreeMap<String, String>,
}

impl AgentProfile {
    pub fn new(id: AgentId, name: impl Into<String>) -> Self {
        let mut public_attrs = BTreeMap::new();
        public_attrs.insert("name".to_owned(), name.into());
        AgentProfile {
            id,
            public_attrs,
            private_attrs: BTreeMap::new(),
        }
    }

    pub fn with_public(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.public_attrs.insert(key.into(), value.into());
        self
    }

    pub fn with_private(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.private_attrs.insert(key.into(), value.into());
        self
    }

    pub fn name(&self) -> &str {
        self.public_attrs
            .get("name")
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !self.public_attrs.contains_key("name") {
            return Err(AgentError::Profile(format!(
                "agent {} has no public `name`",
                self.id
            )));
        }
        if let Some(k) = self
            .public_attrs
            .keys()
            .find(|k| self.private_attrs.contains_key(*k))
        {
            return Err(AgentError::Profile(format!(
                "agent {}: key `{k}` is both public and private",
                self.id
            )));
        }
        Ok(())
    }

    /// `key: value` lines for the public attributes.
    pub fn render_public(&self) -> String {
        render_attrs(&self.public_attrs)
    }

    pub fn render_private(&self) -> String {
        render_attrs(&self.private_attrs)
    }
}

fn render_attrs(attrs: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (i, (k, v)) in attrs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(k);
        out.push_str(": ");
        out.push_str(v);
    }
    out
}

/// Parse a JSON-lines population. Blank lines are skipped; duplicate ids and
/// invalid profiles are rejected.
pub fn parse_population(reader: impl BufRead) -> Result<Vec<AgentProfile>, AgentError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let profile: AgentProfile =
            serde_json::from_str(&line).map_err(|e| AgentError::Population {
                line: i + 1,
                message: e.to_string(),
            })?;
        profile.validate().map_err(|e| AgentError::Population {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(profile.id) {
            return Err(AgentError::Population {
                line: i + 1,
                message: format!("duplicate agent id {}", profile.id),
            });
        }
        out.push(profile);
    }
    Ok(out)
}

pub fn load_population(path: &Path) -> Result<Vec<AgentProfile>, AgentError> {
    let file = std::fs::File::open(path)?;
    parse_population(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn population_rejects_duplicates() {
        let data = "{\"id\":1,\"public\":{\"name\":\"A\"},\"private\":{}}\n\
                    {\"id\":1,\"public\":{\"name\":\"B\"},\"private\":{}}\n";
        let err = parse_population(data.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn population_parses_and_skips_blank_lines() {
        let data = "{\"id\":2,\"public\":{\"name\":\"A\",\"gender\":\"f\"},\"private\":{\"income\":\"1\"}}\n\n\
                    {\"id\":5,\"public\":{\"name\":\"B\"}}\n";
        let pop = parse_population(data.as_bytes()).unwrap();
        assert_eq!(pop.len(), 2);
        assert_eq!(pop[0].private_attrs["income"], "1");
        assert!(pop[1].private_attrs.is_empty());
    }

    #[test]
    fn profile_validation() {
        let p = AgentProfile::new(AgentId(1), "A").with_private("name", "x");
        assert!(p.validate().is_err());
        let mut p = AgentProfile::new(AgentId(1), "A");
        p.public_attrs.clear();
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn profile_serde_round_trip(
            id in any::<u64>(),
            name in "\\PC{0,12}",
            public in proptest::collection::btree_map("[a-m]{1,6}", "\\PC{0,10}", 0..5),
            private in proptest::collection::btree_map("[n-z]{1,6}", "\\PC{0,10}", 0..5),
        ) {
            let mut p = AgentProfile::new(AgentId(id), name);
            p.public_attrs.extend(public.into_iter().filter(|(k, _)| k != "name"));
            p.private_attrs = private;
            let json = serde_json::to_string(&p).unwrap();
            let back: AgentProfile = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
