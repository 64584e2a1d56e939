use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use signtrack_cli::{execute, CommandKind, Options};

#[derive(Parser)]
#[command(name = "signtrack", version, about = "Sign-error tracking of Markov-switching parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One replication of every algorithm on shared draws.
    Track(Args),
    /// Monte Carlo MSE curves and the steady-state summary.
    Mse(Args),
    /// Deviation from the limit ODE and scaled-error covariance.
    Limits(Args),
    /// Running averages of the parameter and the estimates.
    Cumavg(Args),
    /// Quick consistency checks; exits with 4 if any fails.
    Selftest(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: e_eq_mu, e_ll_mu or e_gg_mu (default e_eq_mu).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replications for every Monte Carlo stage.
    #[arg(long, value_name = "N")]
    reps: Option<usize>,
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Track(a) => (CommandKind::Track, a),
        Command::Mse(a) => (CommandKind::Mse, a),
        Command::Limits(a) => (CommandKind::Limits, a),
        Command::Cumavg(a) => (CommandKind::Cumavg, a),
        Command::Selftest(a) => (CommandKind::Selftest, a),
    };
    let opts = Options {
        config: args.config,
        preset: args.preset,
        seed: args.seed,
        out: args.out,
        reps: args.reps,
        threads: args.threads,
    };
    match execute(kind, &opts) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
