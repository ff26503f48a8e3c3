//! `wclre`: one subcommand per pipeline stage, file-based handoff.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "wclre", version, about = "Weighted contrastive pre-training for relation extraction")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Run without worker threads.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Pipeline configuration file; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for all randomness; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a distantly supervised dataset from annotated data and a raw corpus.
    BuildDs {
        #[arg(long)]
        ha: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum instances per triplet.
        #[arg(long)]
        cap: Option<usize>,
        /// Drop instances whose head or tail is a pronoun.
        #[arg(long)]
        drop_pronouns: bool,
        /// `doc`: files are documents split into sentences; `line`: one sentence per line.
        #[arg(long)]
        corpus_mode: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the reliability classifier on annotated data.
    TrainReliability {
        #[arg(long)]
        ha: PathBuf,
        /// Output model directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Attach reliability confidences to a distant dataset.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive plus masked-LM pre-training on a scored distant dataset.
    Pretrain {
        #[arg(long)]
        ds_scored: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a classifier on annotated data.
    Finetune {
        /// Pre-training output directory, or `fresh` for a randomly initialized encoder.
        #[arg(long)]
        init: String,
        #[arg(long)]
        ha: PathBuf,
        /// Output model directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Micro-F1 of a model on a test set.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        na_label: Option<String>,
        /// `exclude_na` or `all_classes`.
        #[arg(long)]
        f1_mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Random low-resource subset of an annotated dataset.
    Split {
        #[arg(long)]
        ha: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Synthetic label-noise benchmark: fine-tune only, unweighted and weighted pre-training.
    BenchNoise {
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured noise rate.
        #[arg(long)]
        noise_rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if cli.sequential {
        wclre::par::set_execution(wclre::par::Execution::Sequential);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
