//! Running scenarios: single runs, seed batches, and re-analysis of stored traces.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use springmesh_core::sim::{Scenario, TraceRecord, World};

use crate::config::{self, ConfigError};
use crate::metrics::{MetricsBuilder, RunMetrics};
use crate::trace::{read_trace, StepRecord, TraceIoError, TraceWriter};

/// Resolved scenario copied next to every trace.
pub const SCENARIO_COPY: &str = "scenario.toml";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid scenario: {0}")]
    Scenario(springmesh_core::Error),
    #[error("runtime invariant violated: {0}")]
    Invariant(springmesh_core::Error),
    #[error(transparent)]
    Io(#[from] TraceIoError),
}

impl RunError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(ConfigError::Io { .. }) | RunError::Io(_) => 1,
            RunError::Config(_) | RunError::Scenario(_) => 2,
            RunError::Invariant(_) => 3,
        }
    }
}

fn world_error(e: springmesh_core::Error) -> RunError {
    match e {
        springmesh_core::Error::Config(_) | springmesh_core::Error::NoConvergence { .. } => RunError::Scenario(e),
        other => RunError::Invariant(other),
    }
}

/// Runs the full horizon, handing every record to `sink`.
pub fn simulate(
    scenario: &Scenario,
    mut sink: impl FnMut(&TraceRecord, &StepRecord) -> Result<(), RunError>,
) -> Result<RunMetrics, RunError> {
    let mut world = World::new(scenario.clone()).map_err(world_error)?;
    let mut metrics = MetricsBuilder::new(scenario, *world.bounds());
    for _ in 0..scenario.steps {
        let rec = world.run_step().map_err(world_error)?;
        let row = StepRecord::from(&rec);
        metrics.push(&row);
        sink(&rec, &row)?;
    }
    Ok(metrics.finish())
}

/// Runs and keeps only the metrics.
pub fn run_metrics(scenario: &Scenario) -> Result<RunMetrics, RunError> {
    simulate(scenario, |_, _| Ok(()))
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(|source| TraceIoError { path: path.to_path_buf(), source }.into())
}

/// Runs and writes the scenario copy, trace files, and `metrics.json` into `dir`.
pub fn run_to_dir(scenario: &Scenario, dir: &Path) -> Result<RunMetrics, RunError> {
    let mut writer = TraceWriter::create(dir, scenario.n_vehicles())?;
    write_text(&dir.join(SCENARIO_COPY), &config::to_toml(scenario).map_err(RunError::Scenario)?)?;
    let metrics = simulate(scenario, |_, row| Ok(writer.write(row)?))?;
    writer.finish()?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write_text(&dir.join(METRICS), &json)?;
    Ok(metrics)
}

/// Runs one scenario per seed in parallel; results come back in seed order.
///
/// With `out` set, each run is written to `out/seed_<seed>`.
pub fn batch(scenario: &Scenario, seeds: Range<u64>, out: Option<&Path>) -> Vec<(u64, Result<RunMetrics, RunError>)> {
    seeds
        .into_par_iter()
        .map(|seed| {
            let mut s = scenario.clone();
            s.seed = seed;
            let res = match out {
                Some(dir) => run_to_dir(&s, &dir.join(format!("seed_{seed}"))),
                None => run_metrics(&s),
            };
            (seed, res)
        })
        .collect()
}

/// Recomputes metrics from a trace directory written by [`run_to_dir`].
pub fn analyze(dir: &Path) -> Result<RunMetrics, RunError> {
    let scenario = config::load_scenario(&dir.join(SCENARIO_COPY))?;
    let world = World::new(scenario.clone()).map_err(world_error)?;
    let mut metrics = MetricsBuilder::new(&scenario, *world.bounds());
    for r in read_trace(&dir.join(TraceWriter::TRACE))? {
        metrics.push(&r);
    }
    Ok(metrics.finish())
}

/// Parses `A..B` (end exclusive) or a single seed.
pub fn parse_seed_range(s: &str) -> Result<Range<u64>, String> {
    let parse = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed '{t}': {e}"));
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (parse(a)?, parse(b)?);
            if b <= a {
                return Err(format!("empty seed range {s}"));
            }
            Ok(a..b)
        }
        None => {
            let a = parse(s)?;
            Ok(a..a + 1)
        }
    }
}

/// Output directory from the flag, the environment, or `./runs`.
pub fn output_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(crate::OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}
