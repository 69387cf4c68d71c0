use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use error::CliError;

/// Multichannel audio-visual contrastive pre-training at desk scale.
///
/// Every command accepts `--config FILE` (JSON) and repeated
/// `--set key.path=value` overrides; the resolved configuration is written
/// as `config.json` next to the command's outputs. `AVW2_THREADS` caps the
/// worker threads used for data generation.
#[derive(Parser, Debug)]
#[command(name = "avw2", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration file merged over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set pretrain.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multichannel audio-visual corpus.
    GenData(commands::GenData),
    /// Delay-and-sum every clip of a corpus into a single channel.
    Beamform(commands::Beamform),
    /// Contrastive pre-training.
    Pretrain(commands::Pretrain),
    /// CTC fine-tuning on top of a pre-trained checkpoint.
    Finetune(commands::Finetune),
    /// Character error rate with multichannel and beamformed input.
    EvalAsr(commands::EvalAsr),
    /// Export context features for every clip.
    ExtractFeatures(commands::ExtractFeatures),
    /// Summarise a checkpoint.
    InspectCheckpoint(commands::InspectCheckpoint),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Beamform(a) => commands::beamform(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::EvalAsr(a) => commands::eval_asr(a),
        Command::ExtractFeatures(a) => commands::extract_features(a),
        Command::InspectCheckpoint(a) => commands::inspect_checkpoint(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({
                "error": e.kind(),
                "exit_code": e.exit_code(),
                "message": e.to_string(),
            });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
