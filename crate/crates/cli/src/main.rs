use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod settings;

use settings::Settings;

/// Arousal classification from gameplay video pixels.
#[derive(Debug, Parser)]
#[command(name = "pix2affect", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Root seed; every random choice derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for cross-validation folds.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output file or directory (meaning depends on the command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// key=value config file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus: one directory of PGM frames and a trace per video.
    Synth(commands::SynthArgs),
    /// Label a corpus directory and write an AFD1 dataset.
    Build(commands::BuildArgs),
    /// Leave-one-video-out cross-validation.
    Xval(commands::XvalArgs),
    /// Train one model on a single train/validation split and save a checkpoint.
    Train(commands::TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(commands::EvalArgs),
    /// Class activation heatmaps for selected segments.
    Gradcam(commands::GradcamArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassArg {
    Low,
    High,
    Both,
}

/// An error that carries its exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

/// 2 usage/config, 3 empty result or bad data, 4 runtime or training failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use pix2affect::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::UnknownModel(_) | E::InvalidLayer { .. } | E::InvalidRange { .. } | E::Io(_) => 2,
                E::InsufficientData(_)
                | E::Pairing(_)
                | E::Parse { .. }
                | E::DegenerateTrace(_)
                | E::Ingest { .. }
                | E::Format(_)
                | E::InvalidWindow { .. } => 3,
                _ => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    4
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIX2AFFECT_LOG", "warn")).init();
    let result = Settings::load(cli.global.config.as_deref()).and_then(|settings| match cli.command {
        Command::Synth(a) => commands::synth(&cli.global, &settings, a),
        Command::Build(a) => commands::build(&cli.global, &settings, a),
        Command::Xval(a) => commands::xval(&cli.global, &settings, a),
        Command::Train(a) => commands::train(&cli.global, &settings, a),
        Command::Eval(a) => commands::eval(&cli.global, &settings, a),
        Command::Gradcam(a) => commands::gradcam(&cli.global, &settings, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
