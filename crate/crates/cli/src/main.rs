use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hetpref_cli::{commands, CliError, Config};

#[derive(Parser)]
#[command(
    name = "hetpref",
    version,
    about = "Simulate heterogeneous preferences, fit EM-DPO, aggregate with min-max regret"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config merged over the paper_defaults preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Directory holding earlier outputs; defaults to --out.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a catalog, a population and a preference dataset.
    Simulate,
    /// Fit a K-type EM-DPO ensemble to the dataset.
    Emdpo,
    /// Combine the ensemble into one policy.
    Aggregate,
    /// Binary flatness, ternary recovery and full-rank round trips.
    Identify,
    /// Margins, accuracies and max-regret of the fitted models and baselines.
    Evaluate,
    /// EM-DPO over a range of K.
    SweepK,
    /// Print the resolved configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref(), cli.seed)?;
    let input = cli.input.clone().unwrap_or_else(|| cli.out.clone());
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, &cli.out),
        Command::Emdpo => commands::emdpo(&cfg, &input, &cli.out),
        Command::Aggregate => commands::aggregate(&cfg, &input, &cli.out),
        Command::Identify => commands::identify(&cfg, &cli.out),
        Command::Evaluate => commands::evaluate(&cfg, &input, &cli.out),
        Command::SweepK => commands::sweep_k(&cfg, &input, &cli.out),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("HETPREF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        hetpref_core::exec::init_threads(n);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
