//! `embr ingest`: corpus JSONL to index directory.

use crate::common::{print_json, read_corpus_records, usage, CliError};
use crate::Globals;
use clap::Args;
use embr_engine::{matches_document, parse_query, save_index, Index, QueryNode};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct IngestArgs {
    /// Corpus JSONL: one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Output index directory (created if missing).
    #[arg(long)]
    index: PathBuf,
    /// Boolean expression; only matching documents are indexed.
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Serialize)]
struct IngestReport {
    indexed: usize,
    filtered_out: usize,
    index: String,
}

pub fn run(args: &IngestArgs, globals: &Globals) -> Result<(), CliError> {
    let filter_text = globals.config.resolve_opt(args.filter.clone(), "filter")?;
    let filter: Option<QueryNode> = filter_text
        .as_deref()
        .map(parse_query)
        .transpose()
        .map_err(CliError::from)?;
    if let Some(node) = &filter {
        if node.contains_nn() {
            return Err(usage("--filter must be a pure Boolean expression (no nn clauses)"));
        }
    }
    log::info!(
        "resolved config: {{\"corpus\":{:?},\"index\":{:?},\"filter\":{:?}}}",
        args.corpus.display().to_string(),
        args.index.display().to_string(),
        filter_text,
    );

    let records = read_corpus_records(&args.corpus)?;
    let index = Index::new();
    let mut indexed = 0usize;
    let mut filtered_out = 0usize;
    for record in records {
        let doc = record.into_document()?;
        let keep = match &filter {
            None => true,
            Some(node) => matches_document(node, &doc)?,
        };
        if keep {
            index.add_document(doc)?;
            indexed += 1;
        } else {
            filtered_out += 1;
        }
    }

    std::fs::create_dir_all(&args.index)?;
    save_index(&index.snapshot(), &args.index)?;
    print_json(&IngestReport {
        indexed,
        filtered_out,
        index: args.index.display().to_string(),
    });
    Ok(())
}
