//! `embr`: reproducible retrieval pipelines over an inverted index with
//! embedding nearest-neighbor search. Subcommands cover synthetic data
//! generation, corpus ingestion, two-tower training, batch inference,
//! segment builds, hybrid search, parameter sweeps, and recall evaluation.
//!
//! Every subcommand is deterministic given identical inputs and --seed.
//! Results go to stdout as JSON or CSV; diagnostics go to stderr. Exit
//! codes: 0 success, 2 usage or validation error, 3 runtime failure.

mod common;
mod embed;
mod eval;
mod gen;
mod index_build;
mod ingest;
mod search;
mod sweep;
mod train;

use clap::{Parser, Subcommand};
use common::{CliError, FileConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "embr", version, about = "Hybrid term and embedding retrieval pipelines")]
struct Cli {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// 0 errors only, 1 +warnings, 2 +info, 3 +debug.
    #[arg(long, global = true, default_value_t = 2)]
    verbosity: u8,
    /// Worker threads for parallel sections (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key=value file supplying defaults for the subcommand's options;
    /// explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic people-search dataset: corpus, training
    /// pairs, session log, eval sessions, and encoder layout.
    Gen(gen::GenArgs),
    /// Build an index directory from a corpus JSONL file.
    Ingest(ingest::IngestArgs),
    /// Train a two-tower model with the configured mining strategy.
    Train(train::TrainArgs),
    /// Batch-infer document embeddings back into a corpus JSONL file.
    Embed(embed::EmbedArgs),
    /// Train quantizers and build an ANN segment inside an index.
    IndexBuild(index_build::IndexBuildArgs),
    /// Run one query: Boolean operators over terms plus nn clauses.
    Search(search::SearchArgs),
    /// Grid-sweep segment configurations and report recall vs. cost.
    Sweep(sweep::SweepArgs),
    /// Recall metrics for a built segment on labeled eval sessions.
    Eval(eval::EvalArgs),
}

/// Per-run context shared by every subcommand.
pub struct Globals {
    pub seed: u64,
    pub config: FileConfig,
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => log::LevelFilter::Error,
        1 => log::LevelFilter::Warn,
        2 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_target(false).try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let globals = Globals { seed: cli.seed, config: FileConfig::load(cli.config.as_deref())? };
    match cli.command {
        Command::Gen(args) => gen::run(&args, &globals),
        Command::Ingest(args) => ingest::run(&args, &globals),
        Command::Train(args) => train::run(&args, &globals),
        Command::Embed(args) => embed::run(&args, &globals),
        Command::IndexBuild(args) => index_build::run(&args, &globals),
        Command::Search(args) => search::run(&args, &globals),
        Command::Sweep(args) => sweep::run(&args, &globals),
        Command::Eval(args) => eval::run(&args, &globals),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbosity);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
