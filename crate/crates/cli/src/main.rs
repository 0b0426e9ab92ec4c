use std::path::PathBuf;
use std::process::ExitCode;

use chain_cli::{run_experiment, Command, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chain",
    version,
    about = "Train, verify and ablate CHAIN-normalized toy GANs"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write its trajectory and final layer state.
    Train(Common),
    /// Run the theorem verification suite.
    Verify(Common),
    /// Train once per variant listed under `variants`.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Verify(a) => (Command::Verify, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
    };
    let run = RunConfig {
        command,
        config_path: args.config,
        out: args.out,
        seed: args.seed,
    };
    match run_experiment(&run) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
