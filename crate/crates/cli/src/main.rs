//! `koopman-roa`: simulate trajectories, fit Koopman models, locate fixed
//! points, classify initial conditions and export boundary grids.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure,
//! 4 empty analytical result.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "koopman-roa", version, about = "Region-of-attraction estimation from trajectory data")]
struct Cli {
    /// TOML file with per-subcommand defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate a built-in model from random initial conditions.
    Simulate(SimulateArgs),
    /// Fit a Koopman model (or sweep dictionaries) on trajectory data.
    Fit(FitArgs),
    /// Locate fixed points of a fitted model and classify their stability.
    FixedPoints(FixedPointArgs),
    /// Label initial conditions with their region of attraction.
    Classify(ClassifyArgs),
    /// Evaluate a unitary eigenfunction on a 2-D grid and export its contour.
    Boundary(BoundaryArgs),
    /// Run every stage end to end and write all artifacts to a directory.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SimulateArgs {
    /// Built-in model: competition or mak.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Final time; defaults to 20 for competition and 40 for mak.
    #[arg(long)]
    pub t_final: Option<f64>,
    /// Initial-condition box, e.g. `0,2x0,2`.
    #[arg(long = "box")]
    #[serde(rename = "box")]
    pub bounds: Option<String>,
    /// Competition rates r1..r6, comma separated.
    #[arg(long)]
    pub r: Option<String>,
    /// Reactor rate constants k1..k4, comma separated.
    #[arg(long)]
    pub k: Option<String>,
    /// Reactor dilution rate.
    #[arg(long)]
    pub d: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Dictionary and data-split options shared by the fitting subcommands.
#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct FitArgs {
    /// Trajectory CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Polynomial family: laguerre, hermite or legendre.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub p: Option<u32>,
    #[arg(long)]
    pub q: Option<f64>,
    /// Comma-separated degrees to sweep.
    #[arg(long)]
    pub sweep_p: Option<String>,
    /// Comma-separated quasi-norm exponents to sweep.
    #[arg(long)]
    pub sweep_q: Option<String>,
    /// Fraction of trajectories used for training.
    #[arg(long, visible_alias = "train-fraction")]
    pub split: Option<f64>,
    /// Multi-step propagation used for the empirical error.
    #[arg(long)]
    pub propagation: Option<String>,
    /// Relative eigenvalue cutoff of the pseudoinverse.
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fixed-point search and stability tolerances.
#[derive(Args, Debug, Default, Deserialize, Clone)]
#[serde(default, rename_all = "kebab-case")]
pub struct Tolerances {
    /// Residual below which a minimum is a fixed point.
    #[arg(long)]
    pub tol_j: Option<f64>,
    /// Distance below which fixed points are merged.
    #[arg(long)]
    pub merge_radius: Option<f64>,
    /// Distance of |λ| from 1 below which a point is non-hyperbolic.
    #[arg(long)]
    pub eps_hyp: Option<f64>,
    /// Distance of μ from 1 below which an eigenfunction is used directly.
    #[arg(long)]
    pub eps_unit: Option<f64>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct FixedPointArgs {
    /// Model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Trajectory CSV supplying start points; the model's data box otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub tol: Tolerances,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ClassifyArgs {
    /// Model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Trajectory CSV; its training split calibrates the classifiers.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// CSV of states to label (header `x1..xn`); the held-out split otherwise.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long, visible_alias = "train-fraction")]
    pub split: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Labels CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub tol: Tolerances,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct BoundaryArgs {
    /// Model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Trajectory CSV used to calibrate the classifiers.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, visible_alias = "train-fraction")]
    pub split: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Two state coordinates spanning the grid, e.g. `0,1`.
    #[arg(long)]
    pub axes: Option<String>,
    /// Grid box on the two axes, e.g. `0,2x0,2`; the data box otherwise.
    #[arg(long)]
    pub bounds: Option<String>,
    /// Nodes per axis.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Values of all coordinates (the grid axes are overwritten); the saddle otherwise.
    #[arg(long)]
    pub frozen: Option<String>,
    /// Which classifier of the decision list to draw.
    #[arg(long)]
    pub stage: Option<usize>,
    /// Use the trivial (constant) eigenfunction instead.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub trivial: Option<bool>,
    /// Grid CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub tol: Tolerances,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PipelineArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    /// Directory receiving the model, report, labels and grids.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Boundary grid nodes per axis for planar systems.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub tol: Tolerances,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
    Empty(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Empty(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Empty(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let file = match cli.config.as_deref().map(config::ConfigFile::load).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(f) => {
            eprintln!("error: {}", f.message());
            return ExitCode::from(f.code());
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => file.section("simulate").and_then(|f| commands::simulate(config::merge_simulate(a, f))),
        Command::Fit(a) => file.section("fit").and_then(|f| commands::fit(config::merge_fit(a, f))),
        Command::FixedPoints(a) => file
            .section("fixed-points")
            .and_then(|f| commands::fixed_points(config::merge_fixed_points(a, f))),
        Command::Classify(a) => file
            .section("classify")
            .and_then(|f| commands::classify(config::merge_classify(a, f))),
        Command::Boundary(a) => file
            .section("boundary")
            .and_then(|f| commands::boundary(config::merge_boundary(a, f))),
        Command::Pipeline(a) => file
            .section("pipeline")
            .and_then(|f| commands::pipeline(config::merge_pipeline(a, f))),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
