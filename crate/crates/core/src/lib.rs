//! Federated phased elimination for linear contextual bandits where each
//! agent only knows a distribution over its own context.
//!
//! Agents estimate per-arm reward vectors from expected features, a server
//! pools the estimates, plans exploration with a multi-agent optimal design
//! and broadcasts the pooled models back. Arms are eliminated per agent with
//! confidence widths derived from the pooled covariance.

pub mod agent;
pub mod design;
pub mod environment;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod messages;
pub mod model;
pub mod protocol;
pub mod server;

pub use agent::{AgentState, ArmStats, LocalEstimate};
pub use design::{solve_design, DesignAllocation, DesignProblem, DesignSolution};
pub use environment::{Environment, NoiseModel};
pub use error::{Error, Result};
pub use harness::{generate_synthetic, load_features, run_sweep, SweepConfig, SweepResult, SyntheticSpec};
pub use linalg::{Matrix, Vector};
pub use messages::{ActiveSetUpload, AllocationMessage, GlobalBroadcast, LocalEstimateUpload, Message};
pub use model::{Bounds, ContextDistribution, FeatureMap, RewardParams, Scenario};
pub use protocol::{build_schedule, compute_alpha, run_protocol, write_trace, PhaseSchedule, RunConfig, RunTrace, Variant};
pub use server::{GlobalModel, InitWeighting, Server, ServerConfig};
