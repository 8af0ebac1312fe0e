//! Rating-distribution fluctuation across repeated runs, and round wall time
//! as a function of population size and concurrency.

mod fluctuation;
mod scaling;

pub use fluctuation::{
    fluctuation, ratings_from_events, run_fluctuation_experiment, write_fluctuation_csv,
    FluctuationResult, RatingDistribution,
};
pub use scaling::{run_scaling_benchmark, write_scaling_csv, ScalingRow};

use thiserror::Error;

use crate::scheduler::SimulationError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
