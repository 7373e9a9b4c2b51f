//! `embr gen`: synthetic dataset generation.

use crate::common::{print_json, CliError, EncoderSpec};
use crate::Globals;
use clap::Args;
use embr_engine::CorpusRecord;
use embr_model::synth::{encoder_config, generate, SynthConfig};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct GenArgs {
    /// Directory receiving corpus.jsonl, train.jsonl, sessions.jsonl,
    /// eval.jsonl, encoder.json, and fuzzy.json.
    #[arg(long)]
    out: PathBuf,
    /// Profiles to generate (minimum 10).
    #[arg(long)]
    docs: Option<usize>,
    /// Name-pool communities; names repeat within a community.
    #[arg(long)]
    communities: Option<usize>,
    #[arg(long)]
    cities: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    /// Fraction of profiles drawing surnames from the shared pool.
    #[arg(long)]
    collision_rate: Option<f64>,
    /// Fraction of sessions with no click but a later success.
    #[arg(long)]
    failure_rate: Option<f64>,
    #[arg(long)]
    train_pairs: Option<usize>,
    /// Simulated click sessions for hard-positive mining.
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    eval_sessions: Option<usize>,
}

#[derive(Serialize)]
struct GenReport<'a> {
    documents: usize,
    train_examples: usize,
    sessions: usize,
    eval_sessions: usize,
    out: &'a str,
}

pub fn run(args: &GenArgs, globals: &Globals) -> Result<(), CliError> {
    let d = SynthConfig::default();
    let cfg = &globals.config;
    let synth = SynthConfig {
        num_docs: cfg.resolve(args.docs, "docs", d.num_docs)?,
        num_communities: cfg.resolve(args.communities, "communities", d.num_communities)?,
        num_cities: cfg.resolve(args.cities, "cities", d.num_cities)?,
        num_groups: cfg.resolve(args.groups, "groups", d.num_groups)?,
        name_collision_rate: cfg.resolve(
            args.collision_rate,
            "collision-rate",
            d.name_collision_rate,
        )?,
        failure_rate: cfg.resolve(args.failure_rate, "failure-rate", d.failure_rate)?,
        train_pairs: cfg.resolve(args.train_pairs, "train-pairs", d.train_pairs)?,
        num_sessions: cfg.resolve(args.sessions, "sessions", d.num_sessions)?,
        eval_sessions: cfg.resolve(args.eval_sessions, "eval-sessions", d.eval_sessions)?,
        seed: globals.seed,
    };
    log::info!(
        "resolved config: {}",
        serde_json::to_string(&synth).expect("config serializes")
    );

    let data = generate(&synth)?;
    std::fs::create_dir_all(&args.out)?;

    let records: Vec<CorpusRecord> = data.corpus.iter().map(CorpusRecord::from_document).collect();
    embr_engine::write_corpus(&args.out.join("corpus.jsonl"), &records)?;
    embr_model::train::write_train_examples(&args.out.join("train.jsonl"), &data.train)?;
    embr_model::mining::write_session_log(&args.out.join("sessions.jsonl"), &data.sessions)?;
    embr_model::eval::write_eval_sessions(&args.out.join("eval.jsonl"), &data.eval)?;

    let (encoder, shared_channels) = encoder_config(&synth);
    let spec = EncoderSpec { query: encoder.clone(), doc: encoder, shared_channels };
    std::fs::write(
        args.out.join("encoder.json"),
        serde_json::to_string_pretty(&spec).expect("encoder spec serializes"),
    )?;
    std::fs::write(
        args.out.join("fuzzy.json"),
        serde_json::to_string_pretty(&data.fuzzy).expect("scenario serializes"),
    )?;

    print_json(&GenReport {
        documents: records.len(),
        train_examples: data.train.len(),
        sessions: data.sessions.len(),
        eval_sessions: data.eval.len(),
        out: &args.out.display().to_string(),
    });
    Ok(())
}
