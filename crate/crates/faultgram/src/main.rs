//! Thin CLI over [`faultgram::pipeline`]: parse arguments, load the config
//! (with `--set` overrides), run one stage, print its one-line summary.

use clap::{Args, Parser, Subcommand};
use faultgram::pipeline::{self, PipelineConfig, PipelineError, StageOutcome};
use std::path::PathBuf;
use std::process::ExitCode;

/// Bearing fault diagnosis: GADF encoding, WGAN-GP augmentation, and a
/// multi-scale attention CNN, driven stage by stage from one TOML config.
#[derive(Parser)]
#[command(name = "faultgram", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override one config value (repeatable), e.g. --set train.epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic bearing dataset described by [synth].
    Synth(CommonArgs),
    /// Encode raw vibration CSVs into GADF image containers.
    Encode(CommonArgs),
    /// Train one WGAN-GP per class on the encoded training set.
    TrainGan(CommonArgs),
    /// Draw synthetic images from the trained generators.
    Augment(CommonArgs),
    /// Train the classifier on real (plus synthetic) images.
    TrainClassifier {
        #[command(flatten)]
        common: CommonArgs,
        /// Train on real images only (shorthand for --set train.augment=false).
        #[arg(long)]
        no_augment: bool,
    },
    /// Score the trained classifier on the held-out test set.
    Evaluate(CommonArgs),
    /// Render the evaluation into plots, CSV tables, and report.json.
    Report(CommonArgs),
}

fn dispatch(
    args: CommonArgs,
    cmd: fn(&PipelineConfig) -> Result<StageOutcome, PipelineError>,
) -> Result<StageOutcome, PipelineError> {
    let config = pipeline::load_config(&args.config, &args.set)?;
    cmd(&config)
}

fn run(cli: Cli) -> Result<StageOutcome, PipelineError> {
    match cli.command {
        Command::Synth(args) => dispatch(args, pipeline::cmd_synth),
        Command::Encode(args) => dispatch(args, pipeline::cmd_encode),
        Command::TrainGan(args) => dispatch(args, pipeline::cmd_train_gan),
        Command::Augment(args) => dispatch(args, pipeline::cmd_augment),
        Command::TrainClassifier { mut common, no_augment } => {
            if no_augment {
                common.set.push("train.augment=false".to_string());
            }
            dispatch(common, pipeline::cmd_train_classifier)
        }
        Command::Evaluate(args) => dispatch(args, pipeline::cmd_evaluate),
        Command::Report(args) => dispatch(args, pipeline::cmd_report),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            println!("[{}] {}", outcome.stage, outcome.message);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
