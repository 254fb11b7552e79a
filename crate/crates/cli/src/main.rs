//! `plumeinv`: synthetic cases, inversions, training and diagnostics from
//! JSON configs.
//!
//! Exit status: 0 on success, 1 on usage or validation errors, 2 when a
//! computation fails (including a failed dot or gradient test).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "plumeinv", version, about = "Differentiable wave/flow/rock inversion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Generate a synthetic case bundle (true/initial models, geometry, observed data).
    MakeCase(Common),
    /// Model-space FWI.
    Fwi(Common),
    /// FWI over the latent space of a trained prior.
    FwiPrior(Common),
    /// Simulate the CO2 plume of the true permeability.
    FlowSim(Common),
    /// Fit permeability to observed saturation snapshots.
    FlowInvert(Common),
    /// Train the normalizing-flow prior.
    TrainNf(Common),
    /// Simulate training pairs and train the FNO surrogate.
    TrainFno(Common),
    /// End-to-end permeability inversion from time-lapse seismic data.
    E2e(Common),
    /// Adjoint dot tests of the linear wave operators.
    DotTest(Common),
    /// Finite-difference checks of every pullback rule.
    GradTest(Common),
}

#[derive(Args, Debug, Clone, PartialEq, Eq)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set optimizer.maxiter=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (defaults to `paths.output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for shot and dataset parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Repeat for more logging.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::MakeCase(c)
            | Command::Fwi(c)
            | Command::FwiPrior(c)
            | Command::FlowSim(c)
            | Command::FlowInvert(c)
            | Command::TrainNf(c)
            | Command::TrainFno(c)
            | Command::E2e(c)
            | Command::DotTest(c)
            | Command::GradTest(c) => c,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let common = cli.command.common();
    let level = match common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
