use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "fdtr", version, about = "Detector training with frozen foundation encoders as plug-ins")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// INI run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Seed (beats FDTR_SEED, which beats the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for generation and evaluation; training is always serial.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    Gen(commands::GenArgs),
    /// Pretrain a foundation encoder on rotation prediction and freeze it.
    Pretrain(commands::PretrainArgs),
    /// Train a detector.
    Train(commands::TrainArgs),
    /// Evaluate a trained detector.
    Eval(commands::EvalArgs),
    /// Train and evaluate a grid of configurations.
    Ablate(commands::AblateArgs),
    /// Write feature-norm maps and prediction overlays.
    Visualize(commands::VisualizeArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(&cli.global, a),
        Command::Pretrain(a) => commands::pretrain(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Ablate(a) => commands::ablate(&cli.global, a),
        Command::Visualize(a) => commands::visualize(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
