//! `embr train`: two-tower training with configurable mining.

use crate::common::{
    corpus_feature_map, load_encoder_spec, load_model, parse_rank_window, print_json,
    read_corpus_records, usage, CliError,
};
use crate::Globals;
use clap::Args;
use embr_core::{cosine_distance, Vector64};
use embr_engine::FeatureRecord;
use embr_model::encoder::TwoTower;
use embr_model::eval::{recall_at_k, EvalSession};
use embr_model::mining::{MiningConfig, NegativeSource, PositiveSource};
use embr_model::train::{train, Hyperparams};
use embr_model::ModelError;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus JSONL supplying document features for positives and
    /// negatives.
    #[arg(long)]
    corpus: PathBuf,
    /// Training examples JSONL (query, positive_id, label_source).
    #[arg(long)]
    examples: PathBuf,
    /// Session log JSONL for hard-positive mining.
    #[arg(long)]
    sessions: Option<PathBuf>,
    /// Encoder layout JSON (written by gen) for fresh initialization.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Warm-start checkpoint; overrides --encoder.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the metrics JSON to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Eval sessions JSONL; when given, full-index recall@10 is
    /// reported after training.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// clicks, impressions, or clicks_plus_hard_positives.
    #[arg(long)]
    positive_source: Option<String>,
    /// random, non_click_impressions, online_hard, offline_hard, or
    /// mixed.
    #[arg(long, visible_alias = "mining")]
    negative_source: Option<String>,
    #[arg(long)]
    hard_per_positive: Option<usize>,
    #[arg(long)]
    random_per_positive: Option<usize>,
    /// Random triplets per offline-hard triplet in mixed mode.
    #[arg(long)]
    easy_hard_ratio: Option<f64>,
    /// Offline mining window as corpus-size fractions, lo:hi.
    #[arg(long)]
    rank_window: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Serialize)]
struct TrainReportOut {
    final_loss: Option<f64>,
    loss_curve: Vec<f64>,
    examples_used: usize,
    triplet_terms: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    recall_at_10: Option<f64>,
    checkpoint: String,
}

fn parse_positive_source(s: &str) -> Result<PositiveSource, CliError> {
    match s {
        "clicks" => Ok(PositiveSource::Clicks),
        "impressions" => Ok(PositiveSource::Impressions),
        "clicks_plus_hard_positives" => Ok(PositiveSource::ClicksPlusHardPositives),
        other => Err(usage(format!(
            "positive source {other:?}: expected clicks, impressions, or clicks_plus_hard_positives"
        ))),
    }
}

fn parse_negative_source(s: &str) -> Result<NegativeSource, CliError> {
    match s {
        "random" => Ok(NegativeSource::Random),
        "non_click_impressions" => Ok(NegativeSource::NonClickImpressions),
        "online_hard" => Ok(NegativeSource::OnlineHard),
        "offline_hard" => Ok(NegativeSource::OfflineHard),
        "mixed" => Ok(NegativeSource::Mixed),
        other => Err(usage(format!(
            "negative source {other:?}: expected random, non_click_impressions, online_hard, \
             offline_hard, or mixed"
        ))),
    }
}

/// Mean recall@10 by exhaustive embedding ranking over the whole corpus.
pub fn full_index_recall_at_10(
    two: &TwoTower,
    corpus: &BTreeMap<String, FeatureRecord>,
    sessions: &[EvalSession],
) -> Result<f64, ModelError> {
    if sessions.is_empty() {
        return Err(ModelError::Data("recall needs at least one eval session".into()));
    }
    let doc_embs: Vec<(&String, Vector64)> = corpus
        .iter()
        .map(|(id, rec)| Ok((id, two.doc.encode(rec)?)))
        .collect::<Result<_, ModelError>>()?;
    let mut total = 0.0;
    for session in sessions {
        let q = two.query.encode(&session.query)?;
        let mut scored: Vec<(&String, f64)> = doc_embs
            .iter()
            .map(|(id, e)| Ok((*id, cosine_distance(&q, e)?)))
            .collect::<Result<_, ModelError>>()?;
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        let ranked: Vec<String> = scored.iter().take(10).map(|(id, _)| (*id).clone()).collect();
        total += recall_at_k(&ranked, &session.target_ids, 10)?;
    }
    Ok(total / sessions.len() as f64)
}

pub fn run(args: &TrainArgs, globals: &Globals) -> Result<(), CliError> {
    let cfg = &globals.config;
    let md = MiningConfig::default();
    let positive =
        cfg.resolve(args.positive_source.clone(), "positive-source", "clicks".to_string())?;
    let negative =
        cfg.resolve(args.negative_source.clone(), "negative-source", "random".to_string())?;
    let window = cfg.resolve_opt(args.rank_window.clone(), "rank-window")?;
    let mining = MiningConfig {
        positive_source: parse_positive_source(&positive)?,
        negative_source: parse_negative_source(&negative)?,
        hard_negatives_per_positive: cfg.resolve(
            args.hard_per_positive,
            "hard-per-positive",
            md.hard_negatives_per_positive,
        )?,
        random_negatives_per_positive: cfg.resolve(
            args.random_per_positive,
            "random-per-positive",
            md.random_negatives_per_positive,
        )?,
        easy_to_hard_ratio: cfg.resolve(
            args.easy_hard_ratio,
            "easy-hard-ratio",
            md.easy_to_hard_ratio,
        )?,
        offline_rank_window: match window {
            Some(s) => parse_rank_window(&s)?,
            None => md.offline_rank_window,
        },
    };
    let hd = Hyperparams::default();
    let hp = Hyperparams {
        lr: cfg.resolve(args.lr, "lr", hd.lr)?,
        batch_size: cfg.resolve(args.batch_size, "batch-size", hd.batch_size)?,
        epochs: cfg.resolve(args.epochs, "epochs", hd.epochs)?,
        margin: cfg.resolve(args.margin, "margin", hd.margin)?,
        seed: globals.seed,
    };
    log::info!(
        "resolved config: {{\"mining\":{},\"hyperparams\":{}}}",
        serde_json::to_string(&mining).expect("config serializes"),
        serde_json::to_string(&hp).expect("config serializes"),
    );

    let records = read_corpus_records(&args.corpus)?;
    let corpus = corpus_feature_map(&records)?;
    let examples = embr_model::train::read_train_examples(&args.examples)?;
    let sessions = match &args.sessions {
        Some(path) => embr_model::mining::read_session_log(path)?,
        None => Vec::new(),
    };

    let mut two = match (&args.init, &args.encoder) {
        (Some(ckpt), _) => load_model(ckpt)?,
        (None, Some(spec_path)) => {
            let spec = load_encoder_spec(spec_path)?;
            TwoTower::init(spec.query, spec.doc, spec.shared_channels, globals.seed)?
        }
        (None, None) => {
            return Err(usage("training needs --encoder (fresh start) or --init (warm start)"))
        }
    };

    let report = train(&mut two, &corpus, &examples, &sessions, &mining, &hp)?;
    embr_model::save_checkpoint(&two, &args.out)?;

    let recall = match &args.eval {
        Some(path) => {
            let eval_sessions = embr_model::eval::read_eval_sessions(path)?;
            Some(full_index_recall_at_10(&two, &corpus, &eval_sessions)?)
        }
        None => None,
    };

    let out = TrainReportOut {
        final_loss: report.loss_curve.last().copied(),
        loss_curve: report.loss_curve,
        examples_used: report.examples_used,
        triplet_terms: report.triplet_terms,
        recall_at_10: recall,
        checkpoint: args.out.display().to_string(),
    };
    if let Some(path) = &args.metrics {
        std::fs::write(path, serde_json::to_string_pretty(&out).expect("report serializes"))?;
    }
    print_json(&out);
    Ok(())
}
