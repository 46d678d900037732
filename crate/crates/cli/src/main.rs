use std::path::PathBuf;
use std::process::exit;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use prnn_cli::config::ExperimentConfig;
use prnn_cli::failure::{Classify, CmdResult};
use prnn_cli::{bench, driver, pipeline};

/// Train and exercise recurrent material-network surrogates against a
/// finite element unit cell.
#[derive(Parser)]
#[command(name = "prnn", version, about)]
struct Cli {
    /// Experiment description (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Replace the configured training seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write outputs here instead of the configured directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every configured dataset and label it with the cell oracle.
    Gen,
    /// Fit one network per seed on the configured training set.
    Train,
    /// Sweep layer sizes and seeds; report train/validation error per cell.
    Grid,
    /// Score checkpoints on labeled datasets and write error reports.
    Eval,
    /// Invert the network under stress control; compare tangent choices.
    Drive,
    /// Time the network against the finite element cell on one ramp.
    Bench,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(failure) => {
            eprintln!("error: {failure}");
            exit(failure.exit_code());
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut config = ExperimentConfig::load(&cli.config).or_user()?;
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        config.train.seeds = vec![seed];
    }
    match cli.command {
        Command::Gen => pipeline::cmd_gen(&config),
        Command::Train => pipeline::cmd_train(&config),
        Command::Grid => pipeline::cmd_grid(&config),
        Command::Eval => pipeline::cmd_eval(&config),
        Command::Drive => driver::cmd_drive(&config),
        Command::Bench => bench::cmd_bench(&config),
    }
}
