//! `embr search`: run one query against a saved index.

use crate::common::{
    checkpoint_id, load_ensemble_spec, load_model, load_query_record, member_key, print_json,
    usage, CliError, EnsembleMode,
};
use crate::Globals;
use clap::Args;
use embr_core::Vector64;
use embr_engine::{load_index, parse_query, FeatureRecord};
use embr_model::ensemble::{cascade_search, member_embedding_key, Ensemble};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Args)]
pub struct SearchArgs {
    /// Index directory (as written by ingest).
    #[arg(long)]
    index: PathBuf,
    /// Query expression, e.g.
    /// '(and (term city:c3) (nn model:m1 :radius 0.9))'.
    /// Omit for cascade ensembles, which build their own candidate
    /// query.
    query: Option<String>,
    /// Read the query expression from a file instead.
    #[arg(long, conflicts_with = "query")]
    query_file: Option<PathBuf>,
    /// Query-side feature record JSON, needed by nn clauses.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Query text shorthand: features are extracted from the string.
    #[arg(long)]
    text: Option<String>,
    /// Single checkpoint; its query tower feeds every nn clause.
    #[arg(long, conflicts_with = "ensemble")]
    model: Option<PathBuf>,
    /// Model id for --model; defaults to the checkpoint file stem.
    #[arg(long, requires = "model")]
    id: Option<String>,
    /// Ensemble spec JSON.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Keep at most this many results.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Serialize)]
struct ResultLine {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    distance: Option<f64>,
}

#[derive(Serialize)]
struct SearchResponse {
    results: Vec<ResultLine>,
    /// Absent for cascade, which reports no scan counter.
    #[serde(skip_serializing_if = "Option::is_none")]
    scanned_documents: Option<usize>,
    elapsed_us: u128,
}

fn query_text(args: &SearchArgs) -> Result<Option<String>, CliError> {
    match (&args.query, &args.query_file) {
        (Some(q), None) => Ok(Some(q.clone())),
        (None, Some(path)) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("query file {}: {e}", path.display())))?;
            Ok(Some(raw.trim().to_string()))
        }
        (None, None) => Ok(None),
        (Some(_), Some(_)) => unreachable!("clap rejects query plus --query-file"),
    }
}

fn require_record(record: Option<FeatureRecord>) -> Result<FeatureRecord, CliError> {
    record.ok_or_else(|| usage("nn retrieval needs query features: give --record or --text"))
}

pub fn run(args: &SearchArgs, globals: &Globals) -> Result<(), CliError> {
    let limit = globals.config.resolve_opt(args.limit, "limit")?;
    let text = query_text(args)?;
    let record = load_query_record(args.record.as_deref(), args.text.as_deref())?;
    let snapshot = load_index(&args.index)?;

    if let Some(spec) = &args.ensemble {
        let loaded = load_ensemble_spec(spec)?;
        if let EnsembleMode::Cascade { rerank_depth } = loaded.mode {
            if text.is_some() {
                return Err(usage(
                    "cascade retrieval builds its own candidate query; omit the query expression",
                ));
            }
            let record = require_record(record)?;
            let stage1 = &loaded.members[0];
            let stage2 = &loaded.members[1];
            let q1 = stage1.towers.query.encode(&record)?;
            let q2 = stage2.towers.query.encode(&record)?;
            log::info!(
                "resolved config: {{\"mode\":\"cascade\",\"stage1\":{:?},\"stage2\":{:?},\"rerank_depth\":{rerank_depth}}}",
                member_key(stage1),
                member_key(stage2),
            );
            let started = Instant::now();
            let mut ranked = cascade_search(
                &snapshot,
                &member_key(stage1),
                &q1,
                &member_key(stage2),
                &q2,
                rerank_depth,
            )?;
            let elapsed_us = started.elapsed().as_micros();
            if let Some(n) = limit {
                ranked.truncate(n);
            }
            print_json(&SearchResponse {
                results: ranked
                    .into_iter()
                    .map(|(id, d)| ResultLine { id, distance: Some(d) })
                    .collect(),
                scanned_documents: None,
                elapsed_us,
            });
            return Ok(());
        }

        // Weighted concatenation: the blend key carries the concatenated
        // query embedding; member keys ride along for mixed expressions.
        let EnsembleMode::WeightedConcat { weights } = loaded.mode else { unreachable!() };
        let ensemble = Ensemble::new(loaded.members, weights)?;
        let text =
            text.ok_or_else(|| usage("give a query expression (or use a cascade ensemble)"))?;
        let node = parse_query(&text)?;
        let mut embs: BTreeMap<String, Vector64> = BTreeMap::new();
        if node.contains_nn() {
            let record = require_record(record)?;
            embs.insert(ensemble.embedding_key(), ensemble.query_embedding(&record)?);
            for member in ensemble.members() {
                embs.insert(member_key(member), member.towers.query.encode(&record)?);
            }
        }
        log::info!(
            "resolved config: {{\"mode\":\"weighted_concat\",\"key\":{:?},\"query\":{text:?}}}",
            ensemble.embedding_key(),
        );
        return run_expression(&node, &embs, &snapshot, limit);
    }

    let text = text.ok_or_else(|| usage("give a query expression (or use a cascade ensemble)"))?;
    let node = parse_query(&text)?;
    let mut embs: BTreeMap<String, Vector64> = BTreeMap::new();
    if node.contains_nn() {
        let record = require_record(record)?;
        let model_path = args
            .model
            .as_ref()
            .ok_or_else(|| usage("nn retrieval needs a model: give --model or --ensemble"))?;
        let model = load_model(model_path)?;
        let q = model.query.encode(&record)?;
        let id = match &args.id {
            Some(id) => id.clone(),
            None => checkpoint_id(model_path)?,
        };
        // One model serves every nn clause: its own key plus any key the
        // expression names, so renamed embedding keys still resolve.
        embs.insert(member_embedding_key(&id), q.clone());
        for key in node.nn_keys() {
            embs.entry(key.to_string()).or_insert_with(|| q.clone());
        }
    }
    log::info!("resolved config: {{\"mode\":\"single\",\"query\":{text:?}}}");
    run_expression(&node, &embs, &snapshot, limit)
}

fn run_expression(
    node: &embr_engine::QueryNode,
    embs: &BTreeMap<String, Vector64>,
    snapshot: &embr_engine::IndexSnapshot,
    limit: Option<usize>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let outcome = embr_engine::search(node, embs, snapshot)?;
    let elapsed_us = started.elapsed().as_micros();
    let mut results: Vec<ResultLine> = outcome
        .results
        .into_iter()
        .map(|r| ResultLine { id: r.doc_id, distance: r.distance })
        .collect();
    if let Some(n) = limit {
        results.truncate(n);
    }
    print_json(&SearchResponse {
        results,
        scanned_documents: Some(outcome.scanned_documents),
        elapsed_us,
    });
    Ok(())
}
