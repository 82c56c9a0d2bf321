use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unicross::data::Split;
use unicross::model::Ablation;
use unicross::Error;

mod commands;

#[derive(Parser)]
#[command(name = "unicross", version, about = "Adapter-based radiology report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate the corpus and write the vocabulary.
    Prepare {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train and write best/last checkpoints plus a JSONL log.
    Train {
        /// Required unless resuming.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint (its config snapshot is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total number of epochs to reach.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Greedy report generation for one image or a whole split.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "split", required_unless_present = "split")]
        image: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        /// Write `{id, text}` lines here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a checkpoint on a split and record the results.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Directory for the score files (defaults to the run directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score candidate texts against references, one text per line.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Print JSON rows instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate every ablation variant with the same budget.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write the configured stand-in backbone as a weight archive.
    ExportBackbone {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        output: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::TokenOutOfRange { .. } => 3,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare { config } => commands::prepare(&config.config, &config.overrides),
        Command::Train {
            config,
            overrides,
            resume,
            epochs,
            ablation,
        } => commands::train(config.as_deref(), &overrides, resume.as_deref(), epochs, ablation),
        Command::Generate {
            checkpoint,
            image,
            split,
            output,
        } => commands::generate(&checkpoint, image.as_deref(), split, output.as_deref()),
        Command::Evaluate {
            checkpoint,
            split,
            out_dir,
        } => commands::evaluate(&checkpoint, split, out_dir.as_deref()),
        Command::Score {
            candidates,
            references,
            json,
        } => commands::score(&candidates, &references, json),
        Command::Ablate { config } => commands::ablate(&config.config, &config.overrides),
        Command::ExportBackbone { config, output } => {
            commands::export_backbone(&config.config, &config.overrides, &output)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
