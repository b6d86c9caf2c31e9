//! Command implementations behind the `expo` binary: training with staged
//! grid search, evaluation tables, explanation lookup, the agent sweep, study
//! log statistics and the task service.
//!
//! Every command is deterministic given its configuration; outputs are
//! written atomically, so a rerun overwrites them with identical bytes.

pub mod agent;
pub mod artifacts;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod serve;
pub mod significance;
pub mod study;
pub mod train;

pub use agent::{cmd_simulate_agent, AgentReport};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use evaluate::{cmd_evaluate, EvaluationSummary};
pub use explain::cmd_explain;
pub use serve::cmd_serve;
pub use study::{cmd_stats, StatsReport};
pub use train::{cmd_train, run_experiment, RunManifest};
