use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "zipper", version, about = "Two-tower text/speech-token fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the speech tower (and optionally the text tower) on unpaired data.
    Pretrain(Common),
    /// Fine-tune a zipped model or the single-decoder baseline on paired data.
    Train(commands::TrainArgs),
    /// Transcribe and synthesize the evaluation splits and report WER.
    Eval(commands::EvalArgs),
    /// Data-fraction sweep over the configured grid.
    Sweep(commands::TowersArgs),
    /// Input-projection or cross-layer-count ablation.
    Ablate(commands::AblateArgs),
    /// Decode from a prompt under a modality plan.
    Generate(commands::GenerateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AblationArg {
    InputProjText,
    InputProjSpeech,
    InputProjBoth,
    NCrossLayers,
}

/// Exit status per failure class.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<zipper_core::Error>() {
        Some(zipper_core::Error::Config { .. }) => 3,
        Some(zipper_core::Error::Checkpoint(_) | zipper_core::Error::ParamMismatch { .. } | zipper_core::Error::UnknownParam(_)) => 4,
        Some(zipper_core::Error::Io(_)) => 5,
        _ if e.downcast_ref::<std::io::Error>().is_some() => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Generate(a) => commands::generate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
