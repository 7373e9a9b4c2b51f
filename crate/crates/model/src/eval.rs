//! Retrieval quality evaluation: recall metrics against exact k-NN, and
//! the accuracy/cost sweep over segment configurations.

use crate::ModelError;
use embr_core::{cosine_distance, AnnConfig, TransformSpec, Vector64};
use embr_engine::{search, Index, IndexSnapshot, NnMode, QueryNode};
use embr_engine::FeatureRecord;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One labeled evaluation query: the documents a searcher would accept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSession {
    pub session_id: String,
    pub query: FeatureRecord,
    pub target_ids: BTreeSet<String>,
}

pub fn read_eval_sessions(path: &Path) -> Result<Vec<EvalSession>, ModelError> {
    let file = std::fs::File::open(path)?;
    let mut sessions = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let session: EvalSession = serde_json::from_str(&line).map_err(|e| ModelError::Format {
            file: format!("{}", path.display()),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        if session.target_ids.is_empty() {
            return Err(ModelError::Format {
                file: format!("{}", path.display()),
                message: format!("line {}: session {:?} has no targets", lineno + 1, session.session_id),
            });
        }
        sessions.push(session);
    }
    Ok(sessions)
}

pub fn write_eval_sessions(path: &Path, sessions: &[EvalSession]) -> Result<(), ModelError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for session in sessions {
        serde_json::to_writer(&mut out, session).map_err(|e| ModelError::Format {
            file: format!("{}", path.display()),
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Fraction of targets present in the first k ranked results.
pub fn recall_at_k(
    ranked: &[String],
    targets: &BTreeSet<String>,
    k: usize,
) -> Result<f64, ModelError> {
    if targets.is_empty() {
        return Err(ModelError::Data("recall is undefined for an empty target set".into()));
    }
    let hits = ranked.iter().take(k).filter(|id| targets.contains(*id)).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// 1 if the exact nearest neighbor appears in the approximate top 10.
pub fn one_recall_at_10(approx_ranked: &[String], exact_top1: &str) -> f64 {
    if approx_ranked.iter().take(10).any(|id| id == exact_top1) {
        1.0
    } else {
        0.0
    }
}

/// Exhaustive k-NN by true cosine distance over live documents carrying
/// the key, ties by doc_id. Uses the same arithmetic as a flat segment
/// scan, so the two agree bit for bit.
pub fn exact_knn(
    snapshot: &IndexSnapshot,
    key: &str,
    query: &Vector64,
    k: usize,
) -> Result<Vec<(String, f64)>, ModelError> {
    let mut scored: Vec<(String, f64)> = snapshot
        .live_documents()
        .filter_map(|(_, doc)| doc.embeddings.get(key).map(|e| (doc, e)))
        .map(|(doc, emb)| {
            let stored = embr_core::DenseVector::new(emb.to_f64_vec())?;
            Ok((doc.doc_id.clone(), cosine_distance(query, &stored)?))
        })
        .collect::<Result<_, ModelError>>()?;
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Whether sweep rows carry wall-clock latencies. `Off` keeps the CSV
/// byte-deterministic by reporting zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimingMode {
    #[default]
    Off,
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub num_clusters: Vec<usize>,
    pub nprobe: Vec<usize>,
    pub pq_bytes: Vec<usize>,
    pub transforms: Vec<TransformSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub num_clusters: usize,
    pub nprobe: usize,
    pub pq_bytes: usize,
    pub transform: String,
    pub one_recall_at_10: f64,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub recall_at_100: f64,
    pub mean_scanned_documents: f64,
    pub mean_latency_us: f64,
}

fn transform_label(spec: &TransformSpec) -> String {
    match spec {
        TransformSpec::None => "none".to_string(),
        TransformSpec::Pca { out_dim } => format!("pca:{out_dim}"),
        TransformSpec::Opq { outer_iters } => format!("opq:{outer_iters}"),
    }
}

pub const SWEEP_CSV_HEADER: &str = "num_clusters,nprobe,pq_bytes,transform,one_recall_at_10,\
recall_at_1,recall_at_10,recall_at_100,mean_scanned_documents,mean_latency_us";

/// Evaluates every feasible (num_clusters, pq_bytes, transform, nprobe)
/// combination on the given queries and returns the points plus a CSV
/// rendering, both sorted by mean scanned documents.
///
/// Each (num_clusters, pq_bytes, transform) segment is built once and
/// reused across nprobe values. Probe-limited evaluation issues a
/// radius-2.0 query, which admits every scanned candidate, then ranks by
/// estimated distance; this exercises the exact scan arithmetic the
/// engine uses in production. Infeasible combinations (for example a
/// code size that does not divide the dimension) are skipped with a
/// logged reason. The index is left holding the last segment built, so
/// treat it as scratch.
pub fn run_sweep(
    index: &Index,
    key: &str,
    queries: &[(Vector64, BTreeSet<String>)],
    grid: &SweepGrid,
    timing: TimingMode,
) -> Result<(Vec<SweepPoint>, String), ModelError> {
    if queries.is_empty() {
        return Err(ModelError::Data("sweep needs at least one evaluation query".into()));
    }
    if grid.num_clusters.is_empty() || grid.nprobe.is_empty() || grid.pq_bytes.is_empty()
        || grid.transforms.is_empty()
    {
        return Err(ModelError::Config("sweep grid has an empty axis".into()));
    }
    for (_, targets) in queries {
        if targets.is_empty() {
            return Err(ModelError::Data("sweep query has an empty target set".into()));
        }
    }

    // Exact nearest neighbors do not depend on the segment configuration.
    let base = index.snapshot();
    let exact_top1: Vec<String> = queries
        .iter()
        .map(|(emb, _)| {
            let top = exact_knn(&base, key, emb, 1)?;
            top.into_iter()
                .next()
                .map(|(id, _)| id)
                .ok_or_else(|| ModelError::Data(format!("no documents carry embedding {key:?}")))
        })
        .collect::<Result<_, _>>()?;

    let mut points = Vec::new();
    for &num_clusters in &grid.num_clusters {
        for &pq_bytes in &grid.pq_bytes {
            for transform in &grid.transforms {
                let config = AnnConfig {
                    num_clusters,
                    nprobe_default: 1,
                    pq_bytes,
                    transform: transform.clone(),
                    coarse_metric: Default::default(),
                    seed: grid.seed,
                };
                if let Err(e) = index.build_segment(key, &config) {
                    log::warn!(
                        "skipping num_clusters={num_clusters} pq_bytes={pq_bytes} transform={}: {e}",
                        transform_label(transform)
                    );
                    continue;
                }
                let snapshot = index.snapshot();
                for &nprobe in &grid.nprobe {
                    let per_query: Vec<(f64, f64, f64, f64, usize, f64)> = queries
                        .par_iter()
                        .zip(&exact_top1)
                        .map(|((emb, targets), top1)| {
                            let node = QueryNode::Nn {
                                key: key.to_string(),
                                mode: NnMode::Radius(2.0),
                                nprobe: Some(nprobe),
                            };
                            let embs = BTreeMap::from([(key.to_string(), emb.clone())]);
                            let started = std::time::Instant::now();
                            let outcome = search(&node, &embs, &snapshot)?;
                            let latency = match timing {
                                TimingMode::Off => 0.0,
                                TimingMode::Wall => started.elapsed().as_secs_f64() * 1e6,
                            };
                            let ranked: Vec<String> =
                                outcome.results.into_iter().map(|r| r.doc_id).collect();
                            Ok((
                                one_recall_at_10(&ranked, top1),
                                recall_at_k(&ranked, targets, 1)?,
                                recall_at_k(&ranked, targets, 10)?,
                                recall_at_k(&ranked, targets, 100)?,
                                outcome.scanned_documents,
                                latency,
                            ))
                        })
                        .collect::<Result<_, ModelError>>()?;
                    let n = per_query.len() as f64;
                    points.push(SweepPoint {
                        num_clusters,
                        nprobe,
                        pq_bytes,
                        transform: transform_label(transform),
                        one_recall_at_10: per_query.iter().map(|p| p.0).sum::<f64>() / n,
                        recall_at_1: per_query.iter().map(|p| p.1).sum::<f64>() / n,
                        recall_at_10: per_query.iter().map(|p| p.2).sum::<f64>() / n,
                        recall_at_100: per_query.iter().map(|p| p.3).sum::<f64>() / n,
                        mean_scanned_documents: per_query.iter().map(|p| p.4 as f64).sum::<f64>()
                            / n,
                        mean_latency_us: per_query.iter().map(|p| p.5).sum::<f64>() / n,
                    });
                }
            }
        }
    }

    points.sort_by(|a, b| {
        a.mean_scanned_documents
            .total_cmp(&b.mean_scanned_documents)
            .then_with(|| a.num_clusters.cmp(&b.num_clusters))
            .then_with(|| a.nprobe.cmp(&b.nprobe))
            .then_with(|| a.pq_bytes.cmp(&b.pq_bytes))
            .then_with(|| a.transform.cmp(&b.transform))
    });

    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3},{:.3}\n",
            p.num_clusters,
            p.nprobe,
            p.pq_bytes,
            p.transform,
            p.one_recall_at_10,
            p.recall_at_1,
            p.recall_at_10,
            p.recall_at_100,
            p.mean_scanned_documents,
            p.mean_latency_us,
        ));
    }
    Ok((points, csv))
}

/// Mean recall@k of each candidate weighting over a fixed member list,
/// brute-forced against the whole corpus. Document embeddings do not
/// depend on the weights, so they are computed once and reused.
pub fn ensemble_weight_grid(
    members: &[crate::ensemble::EnsembleMember],
    candidates: &[Vec<f64>],
    corpus: &BTreeMap<String, FeatureRecord>,
    sessions: &[EvalSession],
    k: usize,
) -> Result<Vec<f64>, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::Config("weight grid needs at least one candidate".into()));
    }
    if sessions.is_empty() {
        return Err(ModelError::Data("weight grid needs at least one evaluation session".into()));
    }
    if k == 0 {
        return Err(ModelError::Config("recall cutoff k must be at least 1".into()));
    }

    let probe = crate::ensemble::Ensemble::new(
        members.to_vec(),
        vec![1.0; members.len()],
    )?;
    let doc_embs: Vec<(String, Vector64)> = corpus
        .iter()
        .map(|(id, rec)| Ok((id.clone(), probe.document_embedding(rec)?)))
        .collect::<Result<_, ModelError>>()?;

    let mut recalls = Vec::with_capacity(candidates.len());
    for weights in candidates {
        let ensemble = crate::ensemble::Ensemble::new(members.to_vec(), weights.clone())?;
        let per_session: Vec<f64> = sessions
            .par_iter()
            .map(|session| {
                let q = ensemble.query_embedding(&session.query)?;
                let mut scored: Vec<(&String, f64)> = doc_embs
                    .iter()
                    .map(|(id, e)| Ok((id, cosine_distance(&q, e)?)))
                    .collect::<Result<_, ModelError>>()?;
                scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
                let ranked: Vec<String> =
                    scored.into_iter().take(k).map(|(id, _)| id.clone()).collect();
                recall_at_k(&ranked, &session.target_ids, k)
            })
            .collect::<Result<_, ModelError>>()?;
        recalls.push(per_session.iter().sum::<f64>() / per_session.len() as f64);
    }
    Ok(recalls)
}
