//! `embr index-build`: build the clustered ANN segment for one
//! embedding key of a saved index.

use crate::common::{parse_transform, print_json, usage, CliError};
use crate::Globals;
use clap::Args;
use embr_core::AnnConfig;
use embr_engine::{load_index, save_index, Index};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct IndexBuildArgs {
    /// Index directory (as written by ingest).
    #[arg(long)]
    index: PathBuf,
    /// Embedding key to build the segment for.
    #[arg(long)]
    key: String,
    #[arg(long)]
    num_clusters: Option<usize>,
    /// Clusters scanned per query unless the query overrides it.
    #[arg(long)]
    nprobe: Option<usize>,
    /// Compressed code size per vector.
    #[arg(long)]
    pq_bytes: Option<usize>,
    /// none, pca:<out_dim>, or opq[:<outer_iters>].
    #[arg(long)]
    transform: Option<String>,
}

#[derive(Serialize)]
struct IndexBuildReport {
    key: String,
    num_clusters: usize,
    nprobe_default: usize,
    pq_bytes: usize,
    transform: String,
    generation: u64,
    index: String,
}

pub fn run(args: &IndexBuildArgs, globals: &Globals) -> Result<(), CliError> {
    let cfg = &globals.config;
    let transform_raw =
        cfg.resolve(args.transform.clone(), "transform", "none".to_string())?;
    let config = AnnConfig {
        num_clusters: cfg.resolve(args.num_clusters, "num-clusters", 16)?,
        nprobe_default: cfg.resolve(args.nprobe, "nprobe", 4)?,
        pq_bytes: cfg.resolve(args.pq_bytes, "pq-bytes", 8)?,
        transform: parse_transform(&transform_raw)?,
        coarse_metric: Default::default(),
        seed: globals.seed,
    };
    log::info!(
        "resolved config: {{\"key\":{:?},\"ann\":{}}}",
        args.key,
        serde_json::to_string(&config).expect("config serializes"),
    );

    let snapshot = load_index(&args.index)?;
    if !snapshot.embedding_dims().contains_key(&args.key) {
        return Err(usage(format!(
            "index has no embeddings under key {:?}; run embed and ingest first",
            args.key
        )));
    }
    let index = Index::from_snapshot(snapshot);
    let generation = index.build_segment(&args.key, &config)?;
    save_index(&index.snapshot(), &args.index)?;

    print_json(&IndexBuildReport {
        key: args.key.clone(),
        num_clusters: config.num_clusters,
        nprobe_default: config.nprobe_default,
        pq_bytes: config.pq_bytes,
        transform: transform_raw,
        generation,
        index: args.index.display().to_string(),
    });
    Ok(())
}
