//! Batch CLI for the line-descriptor pipeline: generate synthetic data,
//! train, evaluate matching and homography estimation, and inspect
//! attention. Verbosity is controlled by the `LINEWISE_LOG` env var
//! (e.g. `LINEWISE_LOG=info`).

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "linewise",
    version,
    about = "Line segment descriptors via masked attention"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed override (sets the scene/homography/train/ransac seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of line-scene pairs.
    GenData {
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset, writing checkpoints and a loss CSV.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for checkpoint.lwck and loss.csv.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Match lines on every pair and report precision/recall, overall and
    /// per length tercile.
    EvalMatch {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output metrics JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also evaluate a freshly initialized model for comparison.
        #[arg(long)]
        compare_untrained: bool,
    },
    /// Full pipeline per pair (match, RANSAC, corner error), then AUC.
    EvalHomography {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output AUC JSON.
        #[arg(long)]
        out: PathBuf,
        /// Optional cumulative-curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Dump per-layer, per-head attention for one line and its match.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Pair index within the dataset.
        #[arg(long)]
        pair_id: usize,
        /// Keyline id within the pair's first image.
        #[arg(long)]
        line_id: u32,
        /// Output attention JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a checkpoint with freshly initialized (untrained) parameters.
    InitCheckpoint {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LINEWISE_LOG")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    let config = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&config, &out),
        Command::Train {
            dataset,
            out,
            resume,
        } => commands::train(&config, &dataset, &out, resume),
        Command::EvalMatch {
            checkpoint,
            dataset,
            out,
            compare_untrained,
        } => commands::eval_match(&config, &checkpoint, &dataset, &out, compare_untrained),
        Command::EvalHomography {
            checkpoint,
            dataset,
            out,
            curve,
        } => commands::eval_homography(&config, &checkpoint, &dataset, &out, curve.as_deref()),
        Command::DumpAttention {
            checkpoint,
            dataset,
            pair_id,
            line_id,
            out,
        } => commands::dump_attention(&config, &checkpoint, &dataset, pair_id, line_id, &out),
        Command::InitCheckpoint { out } => commands::init_checkpoint(&config, &out),
    }
}
