//! Socially aware multiagent collision avoidance with a learned value function.

pub mod agent;
pub mod config;
pub mod error;
pub mod eval;
pub mod policy;
pub mod rewards;
pub mod sim;
pub mod training;
pub mod value_net;

pub use agent::{AgentState, LocalJointState, NeighborObservation, NormRuleSide};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use policy::{Action, Policy, PolicyConfig, ValuePolicy};
pub use rewards::RewardConfig;
pub use sim::{Outcome, SimConfig, TestCase, Trajectory};
pub use training::{TrainConfig, TrainSetup};
pub use value_net::ValueNetwork;
