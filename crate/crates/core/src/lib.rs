//! Safe Bayesian gating of queries across local, edge and cloud retrieval
//! strategies, plus the seeded simulator used to evaluate it.

pub mod config;
pub mod cost;
pub mod environment;
pub mod gate;
pub mod gp;
pub mod knowledge;
pub mod output;
pub mod rng;
pub mod sim;

pub use config::{Overrides, Scenario, ScenarioConfig};
pub use gate::{Context, Gate, GateConfig, Phase, QosSpec};
pub use gp::{GpModel, KernelParams, Posterior};
pub use sim::{compare, run, sweep, Policy, RunOutput, RunSummary, StepRecord};
