use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::text::{word_set, jaccard_sets};

/// Fixed instruction sent to the backend when an agent reflects.
pub const REFLECTION_INSTRUCTION: &str =
    "Summarize high-level insights from the following memories in one or two sentences.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Observation,
    Reflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub content: String,
    pub round: u64,
    pub importance: f64,
    pub kind: MemoryKind,
}

impl MemoryRecord {
    pub fn observation(content: impl Into<String>, round: u64, importance: f64) -> Self {
        MemoryRecord {
            content: content.into(),
            round,
            importance,
            kind: MemoryKind::Observation,
        }
    }

    pub fn reflection(content: impl Into<String>, round: u64) -> Self {
        MemoryRecord {
            content: content.into(),
            round,
            importance: 1.0,
            kind: MemoryKind::Reflection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWeights {
    pub recency: f64,
    pub importance: f64,
    pub similarity: f64,
}

impl Default for RetrievalWeights {
    fn default() -> Self {
        RetrievalWeights {
            recency: 1.0,
            importance: 1.0,
            similarity: 1.0,
        }
    }
}

/// Memory parameters. A short-term capacity of 0 disables the recent buffer and
/// an infinite reflection threshold disables reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub short_term_capacity: usize,
    pub retrieval_k: usize,
    #[serde(with = "infinite_as_null")]
    pub reflection_threshold: f64,
    pub recency_half_life: f64,
    #[serde(default)]
    pub weights: RetrievalWeights,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            short_term_capacity: 5,
            retrieval_k: 3,
            reflection_threshold: 5.0,
            recency_half_life: 3.0,
            weights: RetrievalWeights::default(),
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.retrieval_k == 0 {
            return Err(AgentError::Config("retrieval_k must be >= 1".into()));
        }
        if self.reflection_threshold.is_nan() || self.reflection_threshold <= 0.0 {
            return Err(AgentError::Config(
                "reflection_threshold must be > 0 (null disables reflection)".into(),
            ));
        }
        if !(self.recency_half_life.is_finite() && self.recency_half_life > 0.0) {
            return Err(AgentError::Config(
                "recency_half_life must be a positive finite number".into(),
            ));
        }
        let w = self.weights;
        if [w.recency, w.importance, w.similarity]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(AgentError::Config(
                "retrieval weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Serialize `f64::INFINITY` as JSON `null`, which JSON cannot otherwise carry.
mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Retrieval score of one record against `query` at `current_round`.
pub fn retrieval_score(
    record: &MemoryRecord,
    query_words: &std::collections::BTreeSet<String>,
    current_round: u64,
    config: &MemoryConfig,
    similarity: &dyn Fn(&std::collections::BTreeSet<String>, &str) -> f64,
) -> f64 {
    let age = current_round.saturating_sub(record.round) as f64;
    let recency = (-std::f64::consts::LN_2 * age / config.recency_half_life).exp();
    config.weights.recency * recency
        + config.weights.importance * record.importance
        + config.weights.similarity * similarity(query_words, &record.content)
}

fn lexical_similarity(query: &std::collections::BTreeSet<String>, content: &str) -> f64 {
    jaccard_sets(query, &word_set(content))
}

/// Append-only long-term store plus a bounded FIFO short-term buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMemory {
    config: MemoryConfig,
    long_term: Vec<MemoryRecord>,
    /// Indices into `long_term`, oldest first.
    short_term: VecDeque<usize>,
    importance_since_reflection: f64,
}

impl AgentMemory {
    pub fn new(config: MemoryConfig) -> Self {
        AgentMemory {
            config,
            long_term: Vec::new(),
            short_term: VecDeque::new(),
            importance_since_reflection: 0.0,
        }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn long_term(&self) -> &[MemoryRecord] {
        &self.long_term
    }

    pub fn short_term(&self) -> impl Iterator<Item = &MemoryRecord> {
        self.short_term.iter().map(|i| &self.long_term[*i])
    }

    pub(crate) fn short_term_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.short_term.iter().copied()
    }

    pub fn importance_since_reflection(&self) -> f64 {
        self.importance_since_reflection
    }

    pub fn reflection_due(&self) -> bool {
        self.importance_since_reflection >= self.config.reflection_threshold
    }

    pub(crate) fn reset_reflection_counter(&mut self) {
        self.importance_since_reflection = 0.0;
    }

    pub fn append(&mut self, record: MemoryRecord, current_round: u64) -> Result<(), AgentError> {
        if !(0.0..=1.0).contains(&record.importance) {
            return Err(AgentError::Importance(record.importance));
        }
        if record.round > current_round {
            return Err(AgentError::FutureRound {
                record: record.round,
                current: current_round,
            });
        }
        self.importance_since_reflection += record.importance;
        self.long_term.push(record);
        if self.config.short_term_capacity > 0 {
            self.short_term.push_back(self.long_term.len() - 1);
            while self.short_term.len() > self.config.short_term_capacity {
                self.short_term.pop_front();
            }
        }
        Ok(())
    }

    /// Top-`k` records by retrieval score using lexical (word Jaccard) similarity.
    pub fn retrieve(&self, query: &str, k: usize, current_round: u64) -> Vec<&MemoryRecord> {
        self.retrieve_indices(query, k, current_round)
            .into_iter()
            .map(|i| &self.long_term[i])
            .collect()
    }

    /// Same as [`AgentMemory::retrieve`] with a caller-supplied similarity.
    pub fn retrieve_with(
        &self,
        query: &str,
        k: usize,
        current_round: u64,
        similarity: &dyn Fn(&std::collections::BTreeSet<String>, &str) -> f64,
    ) -> Vec<&MemoryRecord> {
        self.ranked(query, k, current_round, similarity)
            .into_iter()
            .map(|i| &self.long_term[i])
            .collect()
    }

    pub(crate) fn retrieve_indices(&self, query: &str, k: usize, current_round: u64) -> Vec<usize> {
        self.ranked(query, k, current_round, &lexical_similarity)
    }

    fn ranked(
        &self,
        query: &str,
        k: usize,
        current_round: u64,
        similarity: &dyn Fn(&std::collections::BTreeSet<String>, &str) -> f64,
    ) -> Vec<usize> {
        if self.long_term.is_empty() || k == 0 {
            return Vec::new();
        }
        let query_words = word_set(query);
        let mut scored: Vec<(f64, u64, usize)> = self
            .long_term
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (
                    retrieval_score(r, &query_words, current_round, &self.config, similarity),
                    r.round,
                    i,
                )
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| b.1.cmp(&a.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        scored.truncate(k);
        scored.into_iter().map(|(_, _, i)| i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(capacity: usize) -> MemoryConfig {
        MemoryConfig {
            short_term_capacity: capacity,
            ..MemoryConfig::default()
        }
    }

    #[test]
    fn single_append() {
        let mut m = AgentMemory::new(cfg(2));
        m.append(MemoryRecord::observation("a", 0, 0.5), 0).unwrap();
        assert_eq!(m.long_term().len(), 1);
        assert_eq!(m.short_term().count(), 1);
        assert_eq!(m.importance_since_reflection(), 0.5);
    }

    #[test]
    fn fifo_eviction() {
        let mut m = AgentMemory::new(cfg(2));
        for c in ["r1", "r2", "r3"] {
            m.append(MemoryRecord::observation(c, 0, 0.5), 0).unwrap();
        }
        let short: Vec<_> = m.short_term().map(|r| r.content.as_str()).collect();
        assert_eq!(short, ["r2", "r3"]);
        let long: Vec<_> = m.long_term().iter().map(|r| r.content.as_str()).collect();
        assert_eq!(long, ["r1", "r2", "r3"]);
    }

    #[test]
    fn zero_capacity_disables_short_term() {
        let mut m = AgentMemory::new(cfg(0));
        m.append(MemoryRecord::observation("a", 0, 0.5), 0).unwrap();
        assert_eq!(m.short_term().count(), 0);
        assert_eq!(m.long_term().len(), 1);
    }

    #[test]
    fn rejects_bad_importance_and_future_round() {
        let mut m = AgentMemory::new(cfg(2));
        assert!(matches!(
            m.append(MemoryRecord::observation("a", 0, 1.2), 0),
            Err(AgentError::Importance(_))
        ));
        assert!(matches!(
            m.append(MemoryRecord::observation("a", 3, 0.2), 2),
            Err(AgentError::FutureRound { .. })
        ));
        assert!(m.long_term().is_empty());
        assert_eq!(m.importance_since_reflection(), 0.0);
    }

    #[test]
    fn empty_store_retrieves_nothing() {
        let m = AgentMemory::new(cfg(2));
        assert!(m.retrieve("anything", 3, 4).is_empty());
    }

    #[test]
    fn newer_record_wins_on_recency() {
        // Same content and importance; rounds 1 and 5 queried at round 5.
        // Recency terms: 2^(-4/3) ~ 0.397 vs 1.0, so the round-5 record ranks first.
        let mut m = AgentMemory::new(cfg(2));
        m.append(MemoryRecord::observation("walked the dog", 1, 0.5), 1)
            .unwrap();
        m.append(MemoryRecord::observation("walked the dog", 5, 0.5), 5)
            .unwrap();
        let got = m.retrieve("dog", 2, 5);
        assert_eq!(got[0].round, 5);
        assert_eq!(got[1].round, 1);
    }

    #[test]
    fn k_larger_than_store_returns_all() {
        let mut m = AgentMemory::new(cfg(2));
        for i in 0..4 {
            m.append(MemoryRecord::observation(format!("m{i}"), i, 0.1 * i as f64), i)
                .unwrap();
        }
        assert_eq!(m.retrieve("", 10, 4).len(), 4);
    }

    #[test]
    fn threshold_null_round_trips_as_infinity() {
        let c = MemoryConfig {
            reflection_threshold: f64::INFINITY,
            ..MemoryConfig::default()
        };
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"reflection_threshold\":null"));
        let back: MemoryConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_validation() {
        assert!(MemoryConfig::default().validate().is_ok());
        let bad = MemoryConfig {
            retrieval_k: 0,
            ..MemoryConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MemoryConfig {
            recency_half_life: 0.0,
            ..MemoryConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    /// Independent re-scoring: recompute every score from the formula and
    /// check the result is the top-k of a full sort.
    fn brute_force(
        records: &[MemoryRecord],
        query: &str,
        k: usize,
        now: u64,
        half_life: f64,
    ) -> Vec<(f64, u64, usize)> {
        let q: std::collections::BTreeSet<String> = query
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        let mut all: Vec<(f64, u64, usize)> = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let c: std::collections::BTreeSet<String> = r
                    .content
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty())
                    .map(|w| w.to_lowercase())
                    .collect();
                let inter = q.intersection(&c).count() as f64;
                let union = q.union(&c).count() as f64;
                let sim = if union == 0.0 { 1.0 } else { inter / union };
                let rec = 0.5f64.powf((now - r.round) as f64 / half_life);
                (rec + r.importance + sim, r.round, i)
            })
            .collect();
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(b.1.cmp(&a.1))
                .then(a.2.cmp(&b.2))
        });
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn retrieval_matches_brute_force(
            recs in proptest::collection::vec(
                (proptest::sample::select(vec!["cat", "dog", "cat dog", "job", "movie rating", "the cat ate"]),
                 0u64..10, 0u32..=10),
                0..50),
            query in proptest::sample::select(vec!["cat", "dog job", "", "movie"]),
            k in 1usize..8,
        ) {
            let mut m = AgentMemory::new(cfg(3));
            let records: Vec<MemoryRecord> = recs
                .iter()
                .map(|(c, r, imp)| MemoryRecord::observation(*c, *r, f64::from(*imp) / 10.0))
                .collect();
            for r in &records {
                m.append(r.clone(), 10).unwrap();
            }
            let got = m.retrieve_indices(query, k, 10);
            let want = brute_force(&records, query, k, 10, m.config().recency_half_life);
            prop_assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                // Same record, or an exact-score tie resolved identically.
                let gs = retrieval_score(&records[*g], &word_set(query), 10, m.config(), &lexical_similarity);
                prop_assert!((gs - w.0).abs() < 1e-12);
            }
            prop_assert!(m.short_term().count() <= 3);
        }
    }
}
