use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use springmesh::run::{self, RunError};
use springmesh::{config, report, OUT_DIR_ENV};
use springmesh_core::consistency::calibrate_theta;

/// Spring-damper swarm simulator with MITM injection and runtime monitors.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write trace.jsonl, summary.csv, events.csv and metrics.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario horizon.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Run a scenario over a range of seeds in parallel.
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        /// `A..B` (end exclusive).
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        steps: Option<u64>,
        /// Write every run's trace under this directory.
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
        /// Only print the summary table.
        #[arg(long)]
        no_traces: bool,
    },
    /// Recompute and print the summary of a stored trace directory.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Fit the alarm-rate variance scale by Monte Carlo on fair signs.
    CalibrateTheta {
        #[arg(long, default_value_t = 2)]
        tau: u32,
        #[arg(long, default_value_t = 20)]
        window: u32,
        #[arg(long, default_value_t = 2_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(path: &Path, seed: Option<u64>, steps: Option<u64>) -> Result<springmesh_core::sim::Scenario, RunError> {
    let mut s = config::load_scenario(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(steps) = steps {
        s.steps = steps;
    }
    Ok(s)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.cmd {
        Cmd::Run { scenario, seed, steps, out } => {
            let s = load(&scenario, seed, steps)?;
            let dir = run::output_dir(out);
            log::info!("running {} for {} steps into {}", scenario.display(), s.steps, dir.display());
            let m = run::run_to_dir(&s, &dir)?;
            print!("{}", report::run_table(&m));
        }
        Cmd::Batch { scenario, seeds, steps, out, no_traces } => {
            let s = load(&scenario, None, steps)?;
            let range =
                run::parse_seed_range(&seeds).map_err(|e| RunError::Scenario(springmesh_core::Error::Config(e)))?;
            let dir = (!no_traces).then(|| run::output_dir(out));
            let mut ok = Vec::new();
            for (seed, res) in run::batch(&s, range, dir.as_deref()) {
                ok.push((seed, res?));
            }
            print!("{}", report::batch_table(&ok));
        }
        Cmd::Analyze { trace } => {
            let m = run::analyze(&trace)?;
            print!("{}", report::run_table(&m));
        }
        Cmd::CalibrateTheta { tau, window, samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fit = calibrate_theta(tau, window, samples, &mut rng).map_err(RunError::Scenario)?;
            println!("tau {tau}  window {window}  samples {}", fit.samples);
            println!(
                "mean rate {:.6}  empirical var {:.6e}  nominal var {:.6e}",
                fit.mean_rate, fit.empirical_variance, fit.nominal_variance
            );
            println!("theta = {:.4}", fit.theta);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
