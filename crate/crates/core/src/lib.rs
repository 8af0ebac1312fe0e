//! Agent-based social simulation: LLM-backed agents with memory, pluggable
//! scenarios, a deterministic round scheduler, and tooling for judging and
//! correcting agent behavior.

pub mod agent;
pub mod correction;
pub mod environment;
pub mod experiments;
pub mod gateway;
pub mod interaction;
pub mod lanes;
pub mod scenarios;
pub mod scheduler;
pub mod text;

pub use agent::{Agent, AgentId, AgentProfile, MemoryConfig, MemoryRecord, PromptTemplate};
pub use environment::{EnvironmentState, Intervention, InterventionKind};
pub use gateway::{BackendKind, ChatBackend, ChatRequest, ChatResponse, GatewayError};
pub use scheduler::{
    run, run_with, ActionEvent, RoundReport, Simulation, SimulationConfig, SimulationError,
    StopHandle,
};
