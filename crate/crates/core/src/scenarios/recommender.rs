use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ratings::{clamp_rating, load_ratings_csv, rating_index, RatingRecord};
use super::{
    base_profile, read_jsonl, DialogueOutcome, ParsedAction, Resolution, ResolvedAction, Scenario,
    ScenarioError, Task,
};
use crate::agent::{Agent, AgentId, AgentProfile, MemoryRecord};
use crate::gateway::format_rating;
use crate::text::derive_key;

pub const RATING_INSTRUCTION: &str = "Rate each recommended item above on the scale 0.5, 1.0, \
..., 5.0. Reply with one line per item in the form `<item id>=<rating>`.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: u64,
    pub title: String,
    #[serde(default)]
    pub genre: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingAction {
    pub item_id: u64,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecommenderParams {
    pub catalog_size: usize,
    pub items_per_agent: usize,
    pub catalog_path: Option<PathBuf>,
    /// `userId,movieId,rating,timestamp` CSV. Agent `n` is shown the movies
    /// user `n` rated, in timestamp order.
    pub ratings_path: Option<PathBuf>,
}

impl Default for RecommenderParams {
    fn default() -> Self {
        RecommenderParams {
            catalog_size: 200,
            items_per_agent: 5,
            catalog_path: None,
            ratings_path: None,
        }
    }
}

/// Chooses which catalog items an agent sees in a round. Must be a pure
/// function of its arguments so planning and resolution agree.
pub trait RecommendationPolicy: Send + Sync {
    fn recommend(&self, round: u64, agent: AgentId, catalog: &[CatalogItem], k: usize) -> Vec<u64>;
}

/// `k` distinct items drawn uniformly, seeded per (round, agent).
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub seed: u64,
}

impl RecommendationPolicy for RandomPolicy {
    fn recommend(&self, round: u64, agent: AgentId, catalog: &[CatalogItem], k: usize) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_key(&[self.seed, round, agent.0, 0x5ec]));
        rand::seq::index::sample(&mut rng, catalog.len(), k.min(catalog.len()))
            .into_iter()
            .map(|i| catalog[i].id)
            .collect()
    }
}

/// Replays a ratings dataset: user `n`'s rated movies go to agent `n`,
/// `k` per round. Agents without history fall back to `fallback`.
pub struct HistoryPolicy {
    history: HashMap<u64, Vec<u64>>,
    fallback: RandomPolicy,
}

impl HistoryPolicy {
    pub fn new(mut records: Vec<RatingRecord>, seed: u64) -> Self {
        records.sort_by_key(|r| (r.user_id, r.timestamp, r.movie_id));
        let mut history: HashMap<u64, Vec<u64>> = HashMap::new();
        for r in records {
            history.entry(r.user_id).or_default().push(r.movie_id);
        }
        HistoryPolicy {
            history,
            fallback: RandomPolicy { seed },
        }
    }
}

impl RecommendationPolicy for HistoryPolicy {
    fn recommend(&self, round: u64, agent: AgentId, catalog: &[CatalogItem], k: usize) -> Vec<u64> {
        match self.history.get(&agent.0) {
            Some(h) => {
                let start = (round as usize * k) % h.len();
                h.iter().cycle().skip(start).take(k.min(h.len())).copied().collect()
            }
            None => self.fallback.recommend(round, agent, catalog, k),
        }
    }
}

const GENRES: [&str; 8] = [
    "Drama", "Comedy", "Action", "Documentary", "Horror", "Romance", "Animation", "Thriller",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct RatingState {
    histogram: [u64; 10],
    last_round: [u64; 10],
    accepted: u64,
    skipped: u64,
}

pub struct Recommender {
    catalog: Vec<CatalogItem>,
    index: HashMap<u64, usize>,
    k: usize,
    policy: Arc<dyn RecommendationPolicy>,
    state: RatingState,
}

fn pair_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+)\s*=\s*(-?\d+(?:\.\d+)?)").unwrap())
}

/// Every `<item id>=<rating>` pair in `raw`, ratings clamped to the grid.
pub fn parse_rating_lines(raw: &str) -> Vec<RatingAction> {
    pair_re()
        .captures_iter(raw)
        .filter_map(|c| {
            let item_id = c[1].parse().ok()?;
            let rating = c[2].parse::<f64>().ok()?;
            Some(RatingAction {
                item_id,
                rating: clamp_rating(rating),
            })
        })
        .collect()
}

impl Recommender {
    pub fn new(params: RecommenderParams, seed: u64) -> Result<Self, ScenarioError> {
        if params.items_per_agent == 0 {
            return Err(ScenarioError::param("items_per_agent", "must be >= 1"));
        }
        let records = match &params.ratings_path {
            Some(p) => Some(load_ratings_csv(p)?),
            None => None,
        };
        let catalog = match (&params.catalog_path, &records) {
            (Some(p), _) => read_jsonl::<CatalogItem>(p)?,
            (None, Some(recs)) => {
                let ids: std::collections::BTreeSet<u64> = recs.iter().map(|r| r.movie_id).collect();
                ids.into_iter()
                    .map(|id| CatalogItem {
                        id,
                        title: format!("Movie {id}"),
                        genre: String::new(),
                    })
                    .collect()
            }
            (None, None) => (0..params.catalog_size as u64)
                .map(|i| CatalogItem {
                    id: i + 1,
                    title: format!("Movie {}", i + 1),
                    genre: GENRES[(derive_key(&[seed, i]) % GENRES.len() as u64) as usize].into(),
                })
                .collect(),
        };
        if catalog.is_empty() {
            return Err(ScenarioError::param("catalog_size", "catalog is empty"));
        }
        let index: HashMap<u64, usize> = catalog.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        if index.len() != catalog.len() {
            return Err(ScenarioError::param("catalog_path", "duplicate item ids"));
        }
        let policy: Arc<dyn RecommendationPolicy> = match records {
            Some(recs) => Arc::new(HistoryPolicy::new(recs, seed)),
            None => Arc::new(RandomPolicy { seed }),
        };
        Ok(Recommender {
            catalog,
            index,
            k: params.items_per_agent,
            policy,
            state: RatingState::default(),
        })
    }

    pub fn with_policy(mut self, policy: Arc<dyn RecommendationPolicy>) -> Self {
        self.policy = policy;
        self
    }

    pub fn catalog(&self) -> &[CatalogItem] {
        &self.catalog
    }

    /// Accepted ratings per grid value, over all rounds.
    pub fn histogram(&self) -> [u64; 10] {
        self.state.histogram
    }

    pub fn last_round_histogram(&self) -> [u64; 10] {
        self.state.last_round
    }

    pub fn skipped(&self) -> u64 {
        self.state.skipped
    }

    pub fn recommendations(&self, round: u64, agent: AgentId) -> Vec<u64> {
        self.policy.recommend(round, agent, &self.catalog, self.k)
    }

    fn view(&self, items: &[u64]) -> String {
        let mut v = String::from("Recommended items:\n");
        for id in items {
            let Some(item) = self.index.get(id).map(|i| &self.catalog[*i]) else {
                continue;
            };
            if item.genre.is_empty() {
                let _ = writeln!(v, "item:{} {}", item.id, item.title);
            } else {
                let _ = writeln!(v, "item:{} {} ({})", item.id, item.title, item.genre);
            }
        }
        v
    }
}

impl Scenario for Recommender {
    fn name(&self) -> &'static str {
        "recommender"
    }

    fn generate_profile(&self, id: AgentId, rng: &mut ChaCha8Rng) -> AgentProfile {
        let likes = GENRES[rng.random_range(0..GENRES.len())];
        base_profile(id, rng).with_public("favorite_genre", likes)
    }

    fn plan(&self, round: u64, agents: &[Agent]) -> Vec<Task> {
        agents
            .iter()
            .enumerate()
            .map(|(i, a)| Task::Act {
                agent: i,
                instruction: RATING_INSTRUCTION.to_owned(),
                view: self.view(&self.recommendations(round, a.id())),
            })
            .collect()
    }

    fn parse(&self, _agent: AgentId, raw: &str) -> ParsedAction {
        let ratings = parse_rating_lines(raw);
        ParsedAction {
            fallback: ratings.is_empty(),
            value: serde_json::json!({ "ratings": ratings }),
        }
    }

    fn resolve(
        &mut self,
        round: u64,
        actions: &[ResolvedAction],
        _dialogues: &[DialogueOutcome],
    ) -> Resolution {
        self.state.last_round = [0; 10];
        let mut res = Resolution::default();
        for action in actions {
            let recommended = self.recommendations(round, action.agent_id);
            let emitted: Vec<RatingAction> = action
                .parsed
                .as_ref()
                .and_then(|p| p.value.get("ratings"))
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default();
            // First rating per recommended item wins; anything else is ignored.
            let mut by_item: BTreeMap<u64, f64> = BTreeMap::new();
            for r in emitted {
                if recommended.contains(&r.item_id) {
                    by_item.entry(r.item_id).or_insert(r.rating);
                }
            }
            let skipped = recommended.len() - by_item.len();
            self.state.skipped += skipped as u64;
            res.fallbacks += skipped;
            let mut summary = Vec::new();
            for id in &recommended {
                let Some(rating) = by_item.get(id) else {
                    continue;
                };
                let bin = rating_index(*rating).expect("parse clamps onto the grid");
                self.state.histogram[bin] += 1;
                self.state.last_round[bin] += 1;
                self.state.accepted += 1;
                let title = &self.catalog[self.index[id]].title;
                summary.push(format!("{title} {}", format_rating(*rating)));
            }
            if !summary.is_empty() {
                res.memories.push((
                    action.agent_id,
                    MemoryRecord::observation(
                        format!("round {round}: rated {}", summary.join(", ")),
                        round,
                        0.5,
                    ),
                ));
            }
        }
        res
    }

    fn state(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("rating state serializes")
    }

    fn load_state(&mut self, state: &serde_json::Value) -> Result<(), ScenarioError> {
        self.state = if state.is_null() {
            RatingState::default()
        } else {
            serde_json::from_value(state.clone()).map_err(|e| ScenarioError::State(e.to_string()))?
        };
        Ok(())
    }
}
