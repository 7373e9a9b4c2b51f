//! `embr sweep`: accuracy/cost grid over ANN segment configurations.
//!
//! Segments are rebuilt in memory; the on-disk index is never modified.

use crate::common::{load_model, parse_list, parse_transform, print_json, usage, CliError};
use crate::Globals;
use clap::Args;
use embr_core::{TransformSpec, Vector64};
use embr_engine::{load_index, Index};
use embr_model::eval::{read_eval_sessions, run_sweep, SweepGrid, TimingMode};
use embr_model::ModelError;
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::PathBuf;

#[derive(Args)]
pub struct SweepArgs {
    /// Index directory holding the embedded corpus.
    #[arg(long)]
    index: PathBuf,
    /// Embedding key to sweep.
    #[arg(long)]
    key: String,
    /// Eval sessions JSONL (query features plus accepted doc ids).
    #[arg(long)]
    eval: PathBuf,
    /// Checkpoint whose query tower encodes the eval queries.
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated cluster counts.
    #[arg(long)]
    num_clusters: Option<String>,
    /// Comma-separated probe counts.
    #[arg(long)]
    nprobe: Option<String>,
    /// Comma-separated code sizes.
    #[arg(long)]
    pq_bytes: Option<String>,
    /// Comma-separated transforms (none, pca:<d>, opq[:<iters>]).
    #[arg(long)]
    transforms: Option<String>,
    /// off keeps the CSV byte-deterministic; wall records latencies.
    #[arg(long)]
    timing: Option<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SweepFileReport {
    points: usize,
    csv: String,
}

fn parse_timing(s: &str) -> Result<TimingMode, CliError> {
    match s {
        "off" => Ok(TimingMode::Off),
        "wall" => Ok(TimingMode::Wall),
        other => Err(usage(format!("timing {other:?}: expected off or wall"))),
    }
}

pub fn run(args: &SweepArgs, globals: &Globals) -> Result<(), CliError> {
    let cfg = &globals.config;
    let num_clusters: Vec<usize> = parse_list(
        &cfg.resolve(args.num_clusters.clone(), "num-clusters", "16".to_string())?,
        "num-clusters",
    )?;
    let nprobe: Vec<usize> =
        parse_list(&cfg.resolve(args.nprobe.clone(), "nprobe", "4".to_string())?, "nprobe")?;
    let pq_bytes: Vec<usize> =
        parse_list(&cfg.resolve(args.pq_bytes.clone(), "pq-bytes", "8".to_string())?, "pq-bytes")?;
    let transforms: Vec<TransformSpec> =
        cfg.resolve(args.transforms.clone(), "transforms", "none".to_string())?
            .split(',')
            .map(|part| parse_transform(part))
            .collect::<Result<_, _>>()?;
    let timing = parse_timing(&cfg.resolve(args.timing.clone(), "timing", "off".to_string())?)?;
    let grid = SweepGrid { num_clusters, nprobe, pq_bytes, transforms, seed: globals.seed };
    log::info!(
        "resolved config: {{\"key\":{:?},\"num_clusters\":{:?},\"nprobe\":{:?},\"pq_bytes\":{:?},\"seed\":{}}}",
        args.key,
        grid.num_clusters,
        grid.nprobe,
        grid.pq_bytes,
        grid.seed,
    );

    let model = load_model(&args.model)?;
    let sessions = read_eval_sessions(&args.eval)?;
    let queries: Vec<(Vector64, BTreeSet<String>)> = sessions
        .iter()
        .map(|s| Ok((model.query.encode(&s.query)?, s.target_ids.clone())))
        .collect::<Result<_, ModelError>>()
        .map_err(CliError::from)?;

    let index = Index::from_snapshot(load_index(&args.index)?);
    let (points, csv) = run_sweep(&index, &args.key, &queries, &grid, timing)?;

    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            print_json(&SweepFileReport {
                points: points.len(),
                csv: path.display().to_string(),
            });
        }
        None => print!("{csv}"),
    }
    Ok(())
}
