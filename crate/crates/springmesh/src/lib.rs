//! Scenario files, trace persistence, batch runs and the command-line front end
//! for the `springmesh-core` swarm simulator.

pub mod config;
pub mod metrics;
pub mod report;
pub mod run;
pub mod trace;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SPRINGMESH_OUT_DIR";

pub use config::{load_scenario, parse_scenario, ConfigError};
pub use metrics::RunMetrics;
pub use run::{analyze, batch, run_metrics, run_to_dir, simulate, RunError};
