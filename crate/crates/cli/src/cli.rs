use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use planecal::io::{self, Dataset};
use planecal::target::{PatchSelection, RansacConfig};

use crate::commands::{self, FrameSelection, SimulateConfig, SweepCommandConfig};
use crate::error::AppError;
use crate::session::SessionStore;

#[derive(Debug, Parser)]
#[command(name = "planecal", version, about = "LiDAR-camera extrinsic calibration from planar targets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Run the measurement-count / noise-level sweep.
    Sweep(SweepArgs),
    /// Extract measurement pairs from dataset frames.
    Extract(ExtractArgs),
    /// Estimate the extrinsic from measurement pairs.
    Calibrate(CalibrateArgs),
    /// Compare a calibration report with ground truth.
    Evaluate(EvaluateArgs),
    /// Serve the interactive calibration session over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's placement seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory to create.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the sweep's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the sweep table; the summary is printed either way.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Only this frame; every frame otherwise.
    #[arg(long)]
    pub frame: Option<String>,
    /// Explicit seed pixel, instead of the frame's seed hint.
    #[arg(long, requires_all = ["frame", "column", "radius"])]
    pub ring: Option<usize>,
    #[arg(long, requires_all = ["frame", "ring", "radius"])]
    pub column: Option<usize>,
    #[arg(long, requires_all = ["frame", "ring", "column"])]
    pub radius: Option<f64>,
    /// RANSAC config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the RANSAC seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Measurement list to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Measurement list to calibrate from.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    pub measurements: Option<PathBuf>,
    /// Dataset to extract from with each frame's seed hint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Solver config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RANSAC config, used with `--dataset`.
    #[arg(long, requires = "dataset")]
    pub ransac: Option<PathBuf>,
    /// Report to write; printed to stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Dataset whose `ground_truth.json` to compare against.
    #[arg(long, conflicts_with = "ground_truth", required_unless_present = "ground_truth")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Solver config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RANSAC config.
    #[arg(long)]
    pub ransac: Option<PathBuf>,
    /// Session directory; resumed if it holds a session, written on every change.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn load_ransac(path: Option<&Path>, seed: Option<u64>) -> Result<RansacConfig, AppError> {
    let mut cfg: RansacConfig = commands::load_config(path, commands::RANSAC_CONFIG_FORMAT)?;
    if let Some(seed) = seed {
        cfg.rng_seed = seed;
    }
    Ok(cfg)
}

/// Runs one command and returns what it prints on stdout.
pub fn run(cli: Cli) -> Result<String, AppError> {
    match cli.command {
        Command::Simulate(a) => {
            let mut cfg: SimulateConfig = commands::load_config(a.config.as_deref(), commands::SIMULATE_CONFIG_FORMAT)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let truth = commands::simulate(&cfg, &a.output)?;
            Ok(json!({ "dataset": a.output, "frames": truth.frames.len() }).to_string())
        }
        Command::Sweep(a) => {
            let mut cfg: SweepCommandConfig = commands::load_config(a.config.as_deref(), commands::SWEEP_CONFIG_FORMAT)?;
            if let Some(seed) = a.seed {
                cfg.sweep.seed = seed;
            }
            let table = commands::sweep(&cfg)?;
            if let Some(out) = &a.output {
                io::save_sweep(out, &table)?;
            }
            Ok(commands::format_sweep(&table))
        }
        Command::Extract(a) => {
            let dataset = Dataset::open(&a.dataset)?;
            let ransac = load_ransac(a.config.as_deref(), a.seed)?;
            let seed = match (a.ring, a.column, a.radius) {
                (Some(ring), Some(column), Some(radius)) => Some(PatchSelection { ring, column, radius }),
                _ => None,
            };
            let only = a.frame.map(|frame| FrameSelection { frame, seed });
            let pairs = commands::extract(&dataset, only.as_ref(), &ransac)?;
            io::save_measurements(&a.output, &pairs)?;
            Ok(json!({ "measurements": a.output, "count": pairs.len() }).to_string())
        }
        Command::Calibrate(a) => {
            let solver = commands::load_solver_config(a.config.as_deref())?;
            let pairs = match (&a.measurements, &a.dataset) {
                (Some(m), _) => io::load_measurements(m)?,
                (None, Some(d)) => {
                    let dataset = Dataset::open(d)?;
                    commands::extract(&dataset, None, &load_ransac(a.ransac.as_deref(), None)?)?
                }
                (None, None) => return Err(AppError::usage("pass --measurements or --dataset")),
            };
            let report = commands::calibrate(&pairs, &solver)?;
            match &a.output {
                Some(out) => {
                    io::save_report(out, &report)?;
                    Ok(json!({
                        "report": out,
                        "converged": report.converged,
                        "condition_warning": report.condition_warning,
                        "iterations": report.iterations,
                    })
                    .to_string())
                }
                None => Ok(io::to_json_string(io::REPORT_FORMAT, &report)),
            }
        }
        Command::Evaluate(a) => {
            let report = io::load_report(&a.report)?;
            let truth_path = match (&a.ground_truth, &a.dataset) {
                (Some(p), _) => p.clone(),
                (None, Some(d)) => Dataset::open(d)?.ground_truth_path(),
                (None, None) => return Err(AppError::usage("pass --ground-truth or --dataset")),
            };
            let truth = io::load_ground_truth(&truth_path)?;
            Ok(io::to_json_string(commands::EVALUATION_FORMAT, &commands::evaluate(&report, &truth)))
        }
        Command::Serve(a) => {
            let dataset = Dataset::open(&a.dataset)?;
            let solver = commands::load_solver_config(a.config.as_deref())?;
            let ransac = load_ransac(a.ransac.as_deref(), None)?;
            let store = SessionStore::open(dataset, solver, ransac, a.output)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| AppError::new("io", e.to_string()))?;
            runtime.block_on(crate::server::serve(store, a.port, |addr| {
                println!("{}", json!({ "listening": format!("http://{addr}") }));
                let _ = std::io::stdout().flush();
            }))?;
            Ok(String::new())
        }
    }
}
