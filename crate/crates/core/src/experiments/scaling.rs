use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::gateway::{BackendKind, LatencyModel};
use crate::scheduler::{Simulation, SimulationConfig};
use crate::text::derive_key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub agents: usize,
    pub concurrency: usize,
    pub wall_time_ms: f64,
}

/// Time one recommender round for every (agents, concurrency) pair against a
/// deterministic mock with the given latency. Population setup is not timed.
pub fn run_scaling_benchmark(
    agent_counts: &[usize],
    concurrency_levels: &[usize],
    latency: LatencyModel,
    seed: u64,
) -> Result<Vec<ScalingRow>, ExperimentError> {
    latency
        .validate()
        .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    if concurrency_levels.contains(&0) || agent_counts.contains(&0) {
        return Err(ExperimentError::Invalid("agents and concurrency must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for &n in agent_counts {
        for &c in concurrency_levels {
            let kind = BackendKind::MockDeterministic {
                seed: derive_key(&[seed, 0xbe9c]),
                latency: latency.clone(),
            };
            let mut config = SimulationConfig::new("recommender", n, 1, seed, kind);
            config.workers = c;
            let mut sim = Simulation::new(config)?;
            let round = sim.run_round()?;
            rows.push(ScalingRow {
                agents: n,
                concurrency: c,
                wall_time_ms: round.report.wall_time.as_secs_f64() * 1000.0,
            });
        }
    }
    Ok(rows)
}

pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
