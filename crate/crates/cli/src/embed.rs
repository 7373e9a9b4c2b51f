//! `embr embed`: attach document-tower embeddings to a corpus file.

use crate::common::{
    checkpoint_id, load_ensemble_spec, load_model, member_key, print_json, read_corpus_records,
    usage, CliError, EnsembleMode,
};
use crate::Globals;
use clap::Args;
use embr_engine::FeatureRecord;
use embr_model::encoder::TwoTower;
use embr_model::ensemble::{Ensemble, EnsembleMember};
use embr_model::ModelError;
use rayon::prelude::*;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct EmbedArgs {
    /// Corpus JSONL to read and annotate.
    #[arg(long)]
    corpus: PathBuf,
    /// Single checkpoint; embeddings go under key model:<id>.
    #[arg(long, conflicts_with = "ensemble")]
    model: Option<PathBuf>,
    /// Key suffix for --model; defaults to the checkpoint file stem.
    #[arg(long, requires = "model")]
    id: Option<String>,
    /// Ensemble spec JSON. weighted_concat writes one concatenated
    /// embedding, cascade writes each member's own embedding.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Output path; defaults to rewriting --corpus in place.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Embedder {
    Single { key: String, model: Box<TwoTower> },
    Concat { ensemble: Ensemble },
    PerMember { members: Vec<EnsembleMember> },
}

impl Embedder {
    fn keys(&self) -> Vec<String> {
        match self {
            Embedder::Single { key, .. } => vec![key.clone()],
            Embedder::Concat { ensemble } => vec![ensemble.embedding_key()],
            Embedder::PerMember { members } => members.iter().map(member_key).collect(),
        }
    }

    fn embed(&self, features: &FeatureRecord) -> Result<Vec<(String, Vec<f64>)>, ModelError> {
        match self {
            Embedder::Single { key, model } => {
                let e = model.doc.encode(features)?;
                Ok(vec![(key.clone(), e.components().to_vec())])
            }
            Embedder::Concat { ensemble } => {
                let e = ensemble.document_embedding(features)?;
                Ok(vec![(ensemble.embedding_key(), e.components().to_vec())])
            }
            Embedder::PerMember { members } => members
                .iter()
                .map(|m| {
                    let e = m.towers.doc.encode(features)?;
                    Ok((member_key(m), e.components().to_vec()))
                })
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct EmbedReport {
    embedded: usize,
    keys: Vec<String>,
    out: String,
}

pub fn run(args: &EmbedArgs, _globals: &Globals) -> Result<(), CliError> {
    let embedder = match (&args.model, &args.ensemble) {
        (Some(ckpt), None) => {
            let id = match &args.id {
                Some(id) => id.clone(),
                None => checkpoint_id(ckpt)?,
            };
            Embedder::Single {
                key: embr_model::ensemble::member_embedding_key(&id),
                model: Box::new(load_model(ckpt)?),
            }
        }
        (None, Some(spec)) => {
            let loaded = load_ensemble_spec(spec)?;
            match loaded.mode {
                EnsembleMode::WeightedConcat { weights } => {
                    Embedder::Concat { ensemble: Ensemble::new(loaded.members, weights)? }
                }
                EnsembleMode::Cascade { .. } => Embedder::PerMember { members: loaded.members },
            }
        }
        _ => return Err(usage("embedding needs exactly one of --model or --ensemble")),
    };

    let out = args.out.clone().unwrap_or_else(|| args.corpus.clone());
    log::info!(
        "resolved config: {{\"corpus\":{:?},\"keys\":{:?},\"out\":{:?}}}",
        args.corpus.display().to_string(),
        embedder.keys(),
        out.display().to_string(),
    );

    let mut records = read_corpus_records(&args.corpus)?;
    let computed: Vec<Vec<(String, Vec<f64>)>> = records
        .par_iter()
        .map(|record| embedder.embed(&record.features))
        .collect::<Result<_, ModelError>>()
        .map_err(CliError::from)?;
    for (record, pairs) in records.iter_mut().zip(computed) {
        record.embeddings.extend(pairs);
    }
    embr_engine::write_corpus(&out, &records)?;

    print_json(&EmbedReport {
        embedded: records.len(),
        keys: embedder.keys(),
        out: out.display().to_string(),
    });
    Ok(())
}
