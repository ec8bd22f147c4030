//! `ahcnn`: run, calibrate, sweep and simulate staged early-exit models.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use ahcnn_core::FeatureShape;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ahcnn", version, about = "Staged early-exit CNN inference and reconfiguration simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialised model file.
    InitModel(InitModelArgs),
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
    /// Collect per-stage confidence statistics and write a calibration file.
    Calibrate(CalibrateArgs),
    /// Run gated inference and print a JSON report.
    Run(RunArgs),
    /// Evaluate a grid of trigger points and write a CSV table.
    Sweep(SweepArgs),
    /// Simulate the reconfiguration timeline for one batch.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Resnet,
    Toy,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Cifar10,
    Cifar100,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Confidence,
    Entropy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fpga,
    Cpu,
    Compute,
}

#[derive(Args)]
struct InitModelArgs {
    #[arg(long, value_enum, default_value = "resnet")]
    arch: Arch,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "cifar10")]
    dataset: DatasetKind,
    #[arg(long, default_value_t = 512)]
    count: usize,
    /// Image shape `C,H,W` for raw files.
    #[arg(long, value_parser = parse_shape, default_value = "3,32,32")]
    shape: FeatureShape,
    /// Class count for raw files.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "cifar10")]
    dataset: DatasetKind,
}

#[derive(Args, Clone)]
struct GateArgs {
    #[arg(long, value_enum, default_value = "confidence")]
    gate: GateArg,
    /// Trigger point, applied after every stage unless `--calibration` gives per-stage values.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    theta: f64,
    #[arg(long, default_value_t = 5)]
    top_n: usize,
    /// High-priority class indices.
    #[arg(long, value_delimiter = ',')]
    priority: Vec<usize>,
    /// Desired accuracy, used with `--gamma-from-sweep`.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Clone)]
struct SimArgs {
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, value_enum, default_value = "fpga")]
    mode: ModeArg,
    /// Override every conv stage's reconfiguration time.
    #[arg(long)]
    config_ms: Option<f64>,
    /// Per-image gate evaluation cost.
    #[arg(long, default_value_t = 0.0)]
    gate_ms: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    gate: GateArgs,
    #[command(flatten)]
    sim: SimArgs,
    /// Per-stage trigger points from a calibration file.
    #[arg(long, conflicts_with = "gamma")]
    calibration: Option<PathBuf>,
    /// Pick the trigger point from a sweep table using `--lambda`.
    #[arg(long, conflicts_with_all = ["gamma", "calibration"], requires = "lambda")]
    gamma_from_sweep: Option<PathBuf>,
    /// Run every image through every stage.
    #[arg(long)]
    force_full: bool,
    /// Include per-image results in the report.
    #[arg(long)]
    per_image: bool,
    /// Also write the simulated per-stage table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    gate: GateArgs,
    #[command(flatten)]
    sim: SimArgs,
    /// Trigger points to evaluate.
    #[arg(long, value_delimiter = ',', conflicts_with = "calibration")]
    gammas: Vec<f64>,
    /// Use the calibration file's candidate grid.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Take stage costs from this model instead of the reference table.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Survivor counts per stage.
    #[arg(long, value_delimiter = ',', conflicts_with = "data")]
    survivors: Vec<usize>,
    /// Derive survivor counts by running the model on this data.
    #[arg(long, requires = "model")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cifar10")]
    dataset: DatasetKind,
    #[command(flatten)]
    gate: GateArgs,
    #[command(flatten)]
    sim: SimArgs,
    /// Reconfiguration times to sweep, in ms.
    #[arg(long, value_delimiter = ',')]
    config_sweep: Vec<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_shape(s: &str) -> Result<FeatureShape, String> {
    let dims = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("{d:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(FeatureShape::new(c, h, w)),
        _ => Err(format!("expected three positive sizes C,H,W, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            commands::print_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::InitModel(a) => commands::init_model(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Run(a) => commands::run(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            commands::print_error(commands::error_kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
