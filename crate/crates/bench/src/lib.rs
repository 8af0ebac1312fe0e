//! Fixtures shared by the benchmarks.

use gensim_core::agent::AgentMemory;
use gensim_core::gateway::{BackendKind, LatencyModel};
use gensim_core::{MemoryConfig, MemoryRecord, Simulation, SimulationConfig};

const WORDS: &[&str] = &[
    "rent", "job", "cinema", "friend", "salary", "manager", "comedy", "thriller", "interview", "bus",
    "market", "rain", "coffee", "neighbor", "promotion", "drama",
];

/// A memory holding `n` observations spread over `n / 10` rounds.
pub fn memory_with(n: usize) -> AgentMemory {
    let mut m = AgentMemory::new(MemoryConfig {
        reflection_threshold: f64::INFINITY,
        ..MemoryConfig::default()
    });
    for i in 0..n {
        let text = format!(
            "saw {} near the {} and thought about {}",
            WORDS[i % WORDS.len()],
            WORDS[(i * 7 + 3) % WORDS.len()],
            WORDS[(i * 11 + 5) % WORDS.len()]
        );
        let importance = ((i * 37) % 100) as f64 / 100.0;
        m.append(MemoryRecord::observation(text, (i / 10) as u64, importance), (n / 10) as u64)
            .expect("valid record");
    }
    m
}

/// A fresh recommender simulation against a zero-latency mock.
pub fn recommender(agents: usize, workers: usize) -> Simulation {
    let mut c = SimulationConfig::new(
        "recommender",
        agents,
        1,
        7,
        BackendKind::MockDeterministic {
            seed: 7,
            latency: LatencyModel::default(),
        },
    );
    c.workers = workers;
    Simulation::new(c).expect("valid config")
}
