//! `mvp`: dataset generation, training, evaluation and the attention
//! throughput benchmark.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mvp", version, about = "Multiple View Performer shape-completion lab")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; `--set` and dedicated flags take precedence.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// Override one config key, e.g. `--set latent_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, env = "MVP_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory; must be empty unless `--force` is given.
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural view-sequence dataset.
    GenData(commands::GenDataArgs),
    /// Train a model on a generated dataset.
    Train(commands::TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(commands::EvalArgs),
    /// Per-frame attention cost of mvp memory vs mvt history across lengths.
    Bench(commands::BenchArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_env("MVP_LOG")
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, &argv),
        Command::Train(a) => commands::train(a, &argv),
        Command::Eval(a) => commands::eval(a, &argv),
        Command::Bench(a) => commands::bench(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
