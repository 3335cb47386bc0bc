use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scarseg_cli::{pipeline, CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "scarseg", version, about = "Burned-area segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "scarseg.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate synthetic scenes.
    Synth,
    /// Clip, label and patch every event.
    Prepare,
    /// Assign spatial blocks to train/val/test.
    Split,
    /// Train a model.
    Train,
    /// Predict held-out events.
    Predict,
    /// Score held-out predictions.
    Evaluate,
    /// Run every stage in order.
    Run,
}

fn execute(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth => pipeline::synth(&cfg),
        Command::Prepare => pipeline::prepare(&cfg),
        Command::Split => pipeline::split(&cfg),
        Command::Train => pipeline::train(&cfg),
        Command::Predict => pipeline::predict(&cfg),
        Command::Evaluate => pipeline::evaluate(&cfg),
        Command::Run => pipeline::run_all(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
