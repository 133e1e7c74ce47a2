//! `odap`: batch front end for the placement simulator.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odap_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "odap",
    version,
    about = "Compare data placement on databases versus communicating products"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and print its makespan.
    Simulate(SimulateArgs),
    /// Run every placement pattern at every throughput.
    Sweep(SweepArgs),
    /// Fit the factorial model to a sweep and summarize it.
    Analyze(AnalyzeArgs),
    /// Write pattern-index vs makespan data plus the all-database reference line.
    PlotData(PlotDataArgs),
    /// Fit network and timing parameters to measured targets.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file, or a bundled name (case_study_fig2, case_study_fig2_odap).
    /// Defaults to case_study_fig2.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    /// Worker threads for sweeps (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// ODA, ODAP, a bit string (F1 first), or fragment ids such as "F1,F7" or "[!F1, F2, ~F3]".
    #[arg(long)]
    pattern: String,
    /// Product throughput, e.g. 1M, 54M, 100M.
    #[arg(long, default_value = "100M")]
    throughput: String,
    /// Disable RTT jitter.
    #[arg(long)]
    no_jitter: bool,
    /// Write an event trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated throughputs.
    #[arg(long, default_value = "100M,54M,11M,1M", value_delimiter = ',')]
    throughputs: Vec<String>,
    #[arg(long, default_value_t = 10)]
    replicates: u32,
    #[arg(long)]
    no_jitter: bool,
    /// Restrict to these patterns (same syntax as `simulate --pattern`).
    #[arg(long = "pattern")]
    patterns: Vec<String>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Sweep CSV produced by `odap sweep`.
    #[arg(long)]
    input: PathBuf,
    /// Analyze one throughput only.
    #[arg(long)]
    throughput: Option<String>,
    #[arg(long, default_value_t = odap_core::analysis::DEFAULT_ALPHA)]
    alpha: f64,
    /// Highest interaction order in the model.
    #[arg(long, default_value_t = odap_core::analysis::DEFAULT_MAX_ORDER)]
    max_order: usize,
    /// Skip the scenario hash check against the sweep manifest.
    #[arg(long = "unsafe")]
    unsafe_hash: bool,
}

#[derive(Debug, Args)]
struct PlotDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    throughput: Option<String>,
    /// Order points by increasing makespan instead of pattern index.
    #[arg(long)]
    sorted: bool,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Targets TOML with `[[rtt]]` entries and an optional `[makespan]` table.
    #[arg(long)]
    targets: PathBuf,
}

impl Common {
    fn scenario(&self) -> &str {
        self.scenario.as_deref().unwrap_or("case_study_fig2")
    }
}

/// Refusal to clobber an existing file, or a bad flag combination.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    let mut core = err.downcast_ref::<Error>();
    while let Some(Error::Sweep { source, .. }) = core {
        core = Some(source);
    }
    match core {
        Some(Error::Parse(_)) => 2,
        Some(Error::Validation(_) | Error::Config(_) | Error::RankDeficient(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::PlotData(a) => commands::plot_data(a),
        Command::Calibrate(a) => commands::calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
