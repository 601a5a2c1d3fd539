use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use subflow::cli::{parse_config, run_command, Command};
use subflow::Error;

/// Gradient-flow solver for end-point-penalized control energy.
#[derive(Parser)]
#[command(name = "subflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Integrate the configured control and emit the trajectory CSV.
    Simulate(CommonArgs),
    /// Run the gradient flow; emits trace CSV, final control CSV, summary JSON.
    Flow(CommonArgs),
    /// Run the beta-continuation sweep; emits sweep CSV and trends JSON.
    Sweep(CommonArgs),
    /// Probe the Hessian spectrum at the initial control; emits JSON.
    Hessian(CommonArgs),
    /// Run the oracle battery against the configured system; emits JSON.
    Verify(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON experiment description.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's output_dir, then ".").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker count for cold-started sweep levels.
    #[arg(long)]
    jobs: Option<usize>,
}

fn dispatch(cmd: Command, args: &CommonArgs) -> Result<Vec<PathBuf>, Error> {
    let text = std::fs::read_to_string(&args.config)?;
    let cfg = parse_config(&text)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    run_command(cmd, &cfg, &out_dir, args.jobs)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SUBFLOW_LOG")).init();
    let cli = Cli::parse();
    let (cmd, args) = match &cli.command {
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Flow(a) => (Command::Flow, a),
        Sub::Sweep(a) => (Command::Sweep, a),
        Sub::Hessian(a) => (Command::Hessian, a),
        Sub::Verify(a) => (Command::Verify, a),
    };
    match dispatch(cmd, args) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e @ (Error::Parse(_) | Error::Validation { .. })) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
