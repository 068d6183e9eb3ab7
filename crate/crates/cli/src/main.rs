use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use datorus_cli::run::{read_config, Runner, Subcommand};
use datorus_cli::{CliError, ExperimentConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Spectrum,
    VerifyPh,
    SolveH,
    Lyapunov,
    Correlations,
    Deviations,
    MomentBound,
    Coupling,
    Plots,
    All,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Spectrum => Subcommand::Spectrum,
            Command::VerifyPh => Subcommand::VerifyPh,
            Command::SolveH => Subcommand::SolveH,
            Command::Lyapunov => Subcommand::Lyapunov,
            Command::Correlations => Subcommand::Correlations,
            Command::Deviations => Subcommand::Deviations,
            Command::MomentBound => Subcommand::MomentBound,
            Command::Coupling => Subcommand::Coupling,
            Command::Plots => Subcommand::Plots,
            Command::All => Subcommand::All,
        }
    }
}

/// Batch experiments on derived-from-Anosov maps of the 3-torus.
#[derive(Debug, Parser)]
#[command(name = "datorus", version)]
struct Args {
    #[arg(value_enum, required_unless_present = "print_defaults")]
    command: Option<Command>,
    /// TOML experiment file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the output directory of the config file.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,
}

fn run(args: Args) -> Result<(), CliError> {
    if args.print_defaults {
        print!("{}", ExperimentConfig::default().to_toml());
        return Ok(());
    }
    let mut cfg = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.output {
        cfg.output_dir = o;
    }
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(CliError::ConfigInvalid("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Compute(e.to_string()))?;
    }
    let runner = Runner::new(cfg)?;
    let cmd = args.command.expect("clap requires a command");
    runner.run(cmd.into())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("datorus: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
