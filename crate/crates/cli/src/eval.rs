//! `embr eval`: recall metrics for one built segment configuration.
//!
//! The key must already have a segment (run index-build first); eval
//! measures what the index actually serves, unlike sweep, which rebuilds
//! segments for every grid point.

use crate::common::{load_model, parse_list, print_json, usage, CliError};
use crate::Globals;
use clap::Args;
use embr_engine::{load_index, NnMode, QueryNode};
use embr_model::eval::{exact_knn, one_recall_at_10, read_eval_sessions, recall_at_k};
use embr_model::ModelError;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Args)]
pub struct EvalArgs {
    /// Index directory with a built segment for --key.
    #[arg(long)]
    index: PathBuf,
    /// Embedding key to evaluate.
    #[arg(long)]
    key: String,
    /// Eval sessions JSONL (query features plus accepted doc ids).
    #[arg(long)]
    eval: PathBuf,
    /// Checkpoint whose query tower encodes the eval queries.
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated recall cutoffs.
    #[arg(long)]
    k: Option<String>,
    /// Clusters to scan; defaults to the segment's build-time setting.
    #[arg(long)]
    nprobe: Option<usize>,
}

#[derive(Serialize)]
struct EvalReport {
    sessions: usize,
    recall: BTreeMap<usize, f64>,
    one_recall_at_10: f64,
    mean_scanned_documents: f64,
}

pub fn run(args: &EvalArgs, globals: &Globals) -> Result<(), CliError> {
    let cfg = &globals.config;
    let ks: Vec<usize> =
        parse_list(&cfg.resolve(args.k.clone(), "k", "1,10,100".to_string())?, "k")?;
    if ks.iter().any(|&k| k == 0) {
        return Err(usage("recall cutoffs must be at least 1"));
    }
    let nprobe = cfg.resolve_opt(args.nprobe, "nprobe")?;
    let depth = *ks.iter().max().expect("parse_list rejects empty lists").max(&10);
    log::info!(
        "resolved config: {{\"key\":{:?},\"k\":{ks:?},\"nprobe\":{nprobe:?}}}",
        args.key,
    );

    let model = load_model(&args.model)?;
    let sessions = read_eval_sessions(&args.eval)?;
    if sessions.is_empty() {
        return Err(usage(format!("{}: no eval sessions", args.eval.display())));
    }
    let snapshot = load_index(&args.index)?;

    let per_session: Vec<(Vec<f64>, f64, usize)> = sessions
        .par_iter()
        .map(|session| {
            let emb = model.query.encode(&session.query)?;
            let node = QueryNode::Nn {
                key: args.key.clone(),
                mode: NnMode::TopK(depth),
                nprobe,
            };
            let embs = BTreeMap::from([(args.key.clone(), emb.clone())]);
            let outcome = embr_engine::search(&node, &embs, &snapshot)?;
            let ranked: Vec<String> = outcome.results.into_iter().map(|r| r.doc_id).collect();
            let recalls = ks
                .iter()
                .map(|&k| recall_at_k(&ranked, &session.target_ids, k))
                .collect::<Result<Vec<f64>, ModelError>>()?;
            let top1 = exact_knn(&snapshot, &args.key, &emb, 1)?
                .into_iter()
                .next()
                .map(|(id, _)| id)
                .ok_or_else(|| {
                    ModelError::Data(format!("no documents carry embedding {:?}", args.key))
                })?;
            Ok((recalls, one_recall_at_10(&ranked, &top1), outcome.scanned_documents))
        })
        .collect::<Result<_, ModelError>>()
        .map_err(CliError::from)?;

    let n = per_session.len() as f64;
    let mut recall = BTreeMap::new();
    for (i, &k) in ks.iter().enumerate() {
        let mean = per_session.iter().map(|(r, _, _)| r[i]).sum::<f64>() / n;
        recall.insert(k, mean);
    }
    print_json(&EvalReport {
        sessions: per_session.len(),
        recall,
        one_recall_at_10: per_session.iter().map(|(_, o, _)| o).sum::<f64>() / n,
        mean_scanned_documents: per_session.iter().map(|(_, _, s)| *s as f64).sum::<f64>() / n,
    });
    Ok(())
}
