//! Hybrid Boolean + nearest-neighbor search over an index snapshot.
//!
//! An `(nn key ...)` clause is rewritten into scans of the coarse clusters
//! nearest the query embedding. Candidates inside a scanned cluster are
//! verified against the radius or top-K bound using their payload codes:
//! flat codes reproduce the stored f32 components and yield the exact
//! cosine distance; PQ codes yield the ADC estimate `‖q̂ − v̂‖²/2` in the
//! transformed space. Radius clauses behave as ordinary predicates under
//! `and`/`or`; a top-K clause first picks the K globally closest documents
//! (scanning every cluster), then joins Boolean evaluation as the set of
//! those K.

use crate::doc::Term;
use crate::index::IndexSnapshot;
use crate::querylang::{validate_query, NnMode, QueryNode};
use crate::segment::{flat_components, AnnSegment};
use crate::EngineError;
use embr_core::{cosine_distance, l2_normalize, DenseVector, Vector64};
use std::collections::BTreeMap;

/// Which branch of the query AST a document matched.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchTrace {
    Term { term: Term },
    Nn { key: String, distance: f64 },
    /// All children matched; traces in query order.
    And(Vec<MatchTrace>),
    /// Traces of the children that matched, in query order.
    Or(Vec<MatchTrace>),
}

impl MatchTrace {
    /// Smallest nn distance anywhere in the trace; `None` when the match
    /// involved no nn clause.
    pub fn min_nn_distance(&self) -> Option<f64> {
        match self {
            MatchTrace::Term { .. } => None,
            MatchTrace::Nn { distance, .. } => Some(*distance),
            MatchTrace::And(children) | MatchTrace::Or(children) => children
                .iter()
                .filter_map(MatchTrace::min_nn_distance)
                .min_by(|a, b| a.total_cmp(b)),
        }
    }
}

/// One matched document.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub doc_id: String,
    /// Estimated cosine distance; present iff an nn clause participated in
    /// the match (minimum across participating clauses). Always in [0, 2].
    pub distance: Option<f64>,
    pub matched_via: MatchTrace,
}

/// Results plus the scan-cost counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Sorted by (distance, doc_id); documents without a distance follow
    /// all documents with one.
    pub results: Vec<SearchResult>,
    /// Cluster posting entries whose payload was decoded for distance
    /// verification, tombstoned entries included until compaction.
    pub scanned_documents: usize,
}

/// An `(nn)` clause rewritten against a segment: the coarse clusters to
/// scan, ascending by centroid distance, plus the verification bound.
#[derive(Debug, Clone, PartialEq)]
pub struct NnPlan {
    pub key: String,
    pub probes: Vec<usize>,
    pub verify: NnMode,
}

/// Rewrites one `(nn)` node into a cluster-scan plan. Radius mode probes
/// `:nprobe` clusters (config default when absent, capped at the cluster
/// count); top-K mode always probes every cluster.
pub fn rewrite_nn(
    node: &QueryNode,
    query_emb: &Vector64,
    segment: &AnnSegment,
) -> Result<NnPlan, EngineError> {
    let QueryNode::Nn { key, mode, nprobe } = node else {
        return Err(EngineError::InvalidQuery(vec![crate::querylang::Diagnostic {
            path: "root".into(),
            message: "rewrite_nn expects an nn node".into(),
        }]));
    };
    if key != segment.key() {
        return Err(EngineError::UnknownEmbeddingKey(key.clone()));
    }
    if query_emb.dim() != segment.input_dim() {
        return Err(EngineError::EmbeddingDimMismatch {
            key: key.clone(),
            expected: segment.input_dim(),
            got: query_emb.dim(),
        });
    }
    let num_clusters = segment.config().num_clusters;
    let probe_count = match mode {
        NnMode::TopK(_) => num_clusters,
        NnMode::Radius(_) => {
            nprobe.unwrap_or(segment.config().nprobe_default).clamp(1, num_clusters)
        }
    };
    let normalized = l2_normalize(query_emb)?;
    let transformed = segment.transform().apply(normalized.components())?;
    let probes = segment.coarse().assign(&transformed, probe_count)?;
    Ok(NnPlan { key: key.clone(), probes, verify: *mode })
}

struct NnScan {
    /// Live matched ordinal → estimated cosine distance.
    matches: BTreeMap<u32, f64>,
    scanned: usize,
}

/// Scans the planned clusters and verifies candidates against the bound.
fn scan_nn(
    plan: &NnPlan,
    query_emb: &Vector64,
    segment: &AnnSegment,
    snapshot: &IndexSnapshot,
) -> Result<NnScan, EngineError> {
    let mut scanned = 0usize;
    // (distance, ordinal) for every live candidate in scanned clusters.
    let mut candidates: Vec<(f64, u32)> = Vec::new();

    if segment.pq().is_none() {
        // Flat: decode the stored f32 components and compute the canonical
        // cosine distance against the raw query, the same arithmetic the
        // exact brute-force oracle uses, so results agree bit for bit.
        for &cluster in &plan.probes {
            for entry in &segment.clusters()[cluster].entries {
                scanned += 1;
                let stored: Vec<f64> =
                    flat_components(&entry.code).iter().map(|&x| x as f64).collect();
                let stored = DenseVector::<f64>::new(stored)?;
                let distance = cosine_distance(query_emb, &stored)?;
                if snapshot.document(entry.doc_ordinal).is_some() {
                    candidates.push((distance, entry.doc_ordinal));
                }
            }
        }
    } else {
        let pq = segment.pq().expect("checked");
        let normalized = l2_normalize(query_emb)?;
        let transformed = segment.transform().apply(normalized.components())?;
        for &cluster in &plan.probes {
            let centroid = segment.coarse().centroid(cluster).components();
            let residual: Vec<f64> =
                transformed.iter().zip(centroid).map(|(a, b)| a - b).collect();
            let table = pq.adc_table(&residual)?;
            for entry in &segment.clusters()[cluster].entries {
                scanned += 1;
                // ADC gives ‖q̂ − v̂_reconstructed‖² over unit vectors;
                // halving converts to cosine distance.
                let distance = (table.distance(&entry.code) / 2.0).clamp(0.0, 2.0);
                if snapshot.document(entry.doc_ordinal).is_some() {
                    candidates.push((distance, entry.doc_ordinal));
                }
            }
        }
    }

    let matches = match plan.verify {
        NnMode::Radius(radius) => candidates
            .into_iter()
            .filter(|(d, _)| *d <= radius)
            .map(|(d, ord)| (ord, d))
            .collect(),
        NnMode::TopK(k) => {
            // Global K by (distance, doc_id), matching the exact oracle's
            // tie rule.
            let mut ranked: Vec<(f64, &str, u32)> = candidates
                .into_iter()
                .map(|(d, ord)| {
                    let id = snapshot.doc_id_of(ord).expect("candidate is live");
                    (d, id, ord)
                })
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            ranked.truncate(k);
            ranked.into_iter().map(|(d, _, ord)| (ord, d)).collect()
        }
    };
    Ok(NnScan { matches, scanned })
}

/// Evaluates a hybrid query against a snapshot.
///
/// The query must pass [`validate_query`] against the snapshot's segment
/// keys; every nn key needs an entry in `query_embs`.
pub fn search(
    q: &QueryNode,
    query_embs: &BTreeMap<String, Vector64>,
    snapshot: &IndexSnapshot,
) -> Result<SearchOutcome, EngineError> {
    let diags = validate_query(q, &snapshot.ann_keys());
    if !diags.is_empty() {
        return Err(EngineError::InvalidQuery(diags));
    }
    let mut scanned = 0usize;
    let matched = eval_traced(q, query_embs, snapshot, &mut scanned)?;
    let mut results: Vec<SearchResult> = matched
        .into_iter()
        .map(|(ordinal, trace)| SearchResult {
            doc_id: snapshot.doc_id_of(ordinal).expect("matched ordinal is live").to_string(),
            distance: trace.min_nn_distance(),
            matched_via: trace,
        })
        .collect();
    results.sort_by(|a, b| {
        let da = a.distance.unwrap_or(f64::INFINITY);
        let db = b.distance.unwrap_or(f64::INFINITY);
        da.total_cmp(&db).then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    Ok(SearchOutcome { results, scanned_documents: scanned })
}

/// Set evaluation carrying per-document match traces.
fn eval_traced(
    q: &QueryNode,
    query_embs: &BTreeMap<String, Vector64>,
    snapshot: &IndexSnapshot,
    scanned: &mut usize,
) -> Result<BTreeMap<u32, MatchTrace>, EngineError> {
    match q {
        QueryNode::Term { namespace, value } => {
            let term = Term::new(namespace.clone(), value.clone());
            Ok(snapshot
                .term_ordinals(&term)
                .into_iter()
                .map(|ord| (ord, MatchTrace::Term { term: term.clone() }))
                .collect())
        }
        QueryNode::Nn { key, .. } => {
            let segment = snapshot
                .ann_segment(key)
                .ok_or_else(|| EngineError::UnknownEmbeddingKey(key.clone()))?;
            let emb = query_embs
                .get(key)
                .ok_or_else(|| EngineError::MissingQueryEmbedding(key.clone()))?;
            let plan = rewrite_nn(q, emb, segment)?;
            let scan = scan_nn(&plan, emb, segment, snapshot)?;
            *scanned += scan.scanned;
            Ok(scan
                .matches
                .into_iter()
                .map(|(ord, d)| (ord, MatchTrace::Nn { key: key.clone(), distance: d }))
                .collect())
        }
        QueryNode::And(children) => {
            let maps = children
                .iter()
                .map(|c| eval_traced(c, query_embs, snapshot, scanned))
                .collect::<Result<Vec<_>, _>>()?;
            let smallest = maps
                .iter()
                .enumerate()
                .min_by_key(|(_, m)| m.len())
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mut out = BTreeMap::new();
            'candidates: for ordinal in maps[smallest].keys() {
                let mut traces = Vec::with_capacity(maps.len());
                for m in &maps {
                    match m.get(ordinal) {
                        Some(t) => traces.push(t.clone()),
                        None => continue 'candidates,
                    }
                }
                out.insert(*ordinal, MatchTrace::And(traces));
            }
            Ok(out)
        }
        QueryNode::Or(children) => {
            let mut merged: BTreeMap<u32, Vec<MatchTrace>> = BTreeMap::new();
            for child in children {
                for (ordinal, trace) in eval_traced(child, query_embs, snapshot, scanned)? {
                    merged.entry(ordinal).or_default().push(trace);
                }
            }
            Ok(merged
                .into_iter()
                .map(|(ordinal, traces)| (ordinal, MatchTrace::Or(traces)))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::Document;
    use crate::index::Index;
    use crate::querylang::parse_query;
    use embr_core::config::{AnnConfig, TransformSpec};
    use embr_core::Vector32;

    fn flat_config(num_clusters: usize, nprobe: usize) -> AnnConfig {
        AnnConfig {
            num_clusters,
            nprobe_default: nprobe,
            pq_bytes: 0,
            transform: TransformSpec::None,
            coarse_metric: Default::default(),
            seed: 5,
        }
    }

    fn doc_with_embedding(id: &str, terms: &[(&str, &str)], emb: &[f64]) -> Document {
        let mut d = Document::new(id);
        for (ns, v) in terms {
            d = d.with_term(ns, v);
        }
        d.embeddings.insert("m1".into(), Vector32::from_f64(emb).unwrap());
        d
    }

    fn embs(values: &[f64]) -> BTreeMap<String, Vector64> {
        [("m1".to_string(), Vector64::from_f64(values).unwrap())].into()
    }

    /// Two-doc corpus: the target profile in seattle at (1, 0), a decoy in
    /// menlo_park pointing the other way.
    fn fuzzy_corpus() -> Index {
        let index = Index::new();
        index
            .add_document(doc_with_embedding(
                "target",
                &[("text", "john"), ("text", "smith"), ("location", "seattle")],
                &[1.0, 0.0],
            ))
            .unwrap();
        index
            .add_document(doc_with_embedding(
                "decoy",
                &[("text", "john"), ("location", "menlo_park")],
                &[-1.0, 0.0],
            ))
            .unwrap();
        index.build_segment("m1", &flat_config(1, 1)).unwrap();
        index
    }

    #[test]
    fn misspelled_term_fails_but_nn_radius_recovers_the_target() {
        let index = fuzzy_corpus();
        let snap = index.snapshot();
        // "john smithe": the term branch requires text:smithe which no doc
        // carries; the embedding sits at cosine distance 0.2 from the
        // target.
        let q = parse_query(
            "(or (and (term text:john) (term text:smithe)) (nn m1 :radius 0.24))",
        )
        .unwrap();
        let out = search(&q, &embs(&[0.8, 0.6]), &snap).unwrap();
        assert_eq!(out.results.len(), 1);
        let hit = &out.results[0];
        assert_eq!(hit.doc_id, "target");
        let d = hit.distance.expect("nn participated");
        assert!((d - 0.2).abs() < 1e-9, "distance {d}");
        // Term-only version of the same query misses.
        let term_only = parse_query("(and (term text:john) (term text:smithe))").unwrap();
        let out = search(&term_only, &embs(&[0.8, 0.6]), &snap).unwrap();
        assert!(out.results.is_empty());
    }

    #[test]
    fn radius_just_below_the_nearest_distance_matches_nothing() {
        let index = fuzzy_corpus();
        let snap = index.snapshot();
        let q = parse_query("(nn m1 :radius 0.19)").unwrap();
        let out = search(&q, &embs(&[0.8, 0.6]), &snap).unwrap();
        assert!(out.results.is_empty());
        assert_eq!(out.scanned_documents, 2);
    }

    #[test]
    fn conjunction_with_terms_filters_nn_matches() {
        let index = fuzzy_corpus();
        let snap = index.snapshot();
        // Radius 2.0 matches both docs; the location term keeps only the
        // menlo_park one.
        let q = parse_query("(and (term location:menlo_park) (nn m1 :radius 2.0))").unwrap();
        let out = search(&q, &embs(&[0.8, 0.6]), &snap).unwrap();
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.results[0].doc_id, "decoy");
        assert!(out.results[0].distance.unwrap() > 1.0);
    }

    #[test]
    fn query_at_a_stored_embedding_matches_it_at_distance_zero() {
        let index = fuzzy_corpus();
        let snap = index.snapshot();
        let q = parse_query("(nn m1 :radius 0.01 :nprobe 1)").unwrap();
        let out = search(&q, &embs(&[1.0, 0.0]), &snap).unwrap();
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.results[0].doc_id, "target");
        assert!(out.results[0].distance.unwrap() < 1e-12);
    }

    #[test]
    fn topk_scans_every_cluster_and_keeps_k() {
        let index = Index::new();
        for (i, angle_deg) in [0.0f64, 10.0, 20.0, 170.0].into_iter().enumerate() {
            let a = angle_deg.to_radians();
            index
                .add_document(doc_with_embedding(
                    &format!("d{i}"),
                    &[("x", "all")],
                    &[a.cos(), a.sin()],
                ))
                .unwrap();
        }
        index.build_segment("m1", &flat_config(2, 1)).unwrap();
        let snap = index.snapshot();

        let topk = parse_query("(nn m1 :topk 2)").unwrap();
        let out = search(&topk, &embs(&[1.0, 0.0]), &snap).unwrap();
        assert_eq!(out.scanned_documents, 4, "top-K scans all clusters");
        let ids: Vec<&str> = out.results.iter().map(|r| r.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["d0", "d1"]);
        assert!(out.results[0].distance.unwrap() <= out.results[1].distance.unwrap());

        // Radius mode with nprobe=1 scans at most one cluster's entries.
        let radius = parse_query("(nn m1 :radius 0.1 :nprobe 1)").unwrap();
        let r_out = search(&radius, &embs(&[1.0, 0.0]), &snap).unwrap();
        assert!(r_out.scanned_documents <= out.scanned_documents);
    }

    #[test]
    fn nprobe_widening_only_adds_matches() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let index = Index::new();
        for i in 0..60 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            index
                .add_document(doc_with_embedding(&format!("d{i:02}"), &[], &v))
                .unwrap();
        }
        index.build_segment("m1", &flat_config(6, 1)).unwrap();
        let snap = index.snapshot();
        let query = [0.3, -0.2, 0.9, 0.1];
        let mut previous: Vec<String> = Vec::new();
        for nprobe in 1..=6 {
            let q = parse_query(&format!("(nn m1 :radius 0.5 :nprobe {nprobe})")).unwrap();
            let out = search(&q, &embs(&query), &snap).unwrap();
            let ids: Vec<String> = out.results.iter().map(|r| r.doc_id.clone()).collect();
            for id in &previous {
                assert!(ids.contains(id), "nprobe {nprobe} lost {id}");
            }
            previous = ids;
            if nprobe == 6 {
                assert_eq!(out.scanned_documents, 60);
            }
        }
    }

    #[test]
    fn hybrid_and_equals_intersection_of_branches() {
        let index = fuzzy_corpus();
        let snap = index.snapshot();
        let b = parse_query("(term text:john)").unwrap();
        let nn = parse_query("(nn m1 :radius 0.9)").unwrap();
        let both = parse_query("(and (term text:john) (nn m1 :radius 0.9))").unwrap();
        let q_emb = embs(&[0.8, 0.6]);
        let ids = |node: &QueryNode| -> Vec<String> {
            search(node, &q_emb, &snap)
                .unwrap()
                .results
                .into_iter()
                .map(|r| r.doc_id)
                .collect()
        };
        let b_ids = ids(&b);
        let nn_ids = ids(&nn);
        let want: Vec<String> =
            b_ids.iter().filter(|id| nn_ids.contains(id)).cloned().collect();
        let mut got = ids(&both);
        got.sort();
        let mut want = want;
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn removed_documents_are_scanned_but_never_returned() {
        let index = fuzzy_corpus();
        index.remove_document("target").unwrap();
        let snap = index.snapshot();
        let q = parse_query("(nn m1 :radius 2.0)").unwrap();
        let out = search(&q, &embs(&[1.0, 0.0]), &snap).unwrap();
        assert_eq!(out.scanned_documents, 2, "tombstoned entry still scanned");
        let ids: Vec<&str> = out.results.iter().map(|r| r.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["decoy"]);
        // After compaction the dead entry is gone from the segment.
        index.compact().unwrap();
        let out = search(&q, &embs(&[1.0, 0.0]), &index.snapshot()).unwrap();
        assert_eq!(out.scanned_documents, 1);
    }

    #[test]
    fn unknown_key_and_missing_embedding_are_reported() {
        let index = fuzzy_corpus();
        let snap = index.snapshot();
        let q = parse_query("(nn nope :radius 0.5)").unwrap();
        assert!(matches!(
            search(&q, &embs(&[1.0, 0.0]), &snap),
            Err(EngineError::InvalidQuery(_))
        ));
        let q = parse_query("(nn m1 :radius 0.5)").unwrap();
        assert!(matches!(
            search(&q, &BTreeMap::new(), &snap),
            Err(EngineError::MissingQueryEmbedding(_))
        ));
    }

    #[test]
    fn pure_boolean_search_reports_no_distance() {
        let index = fuzzy_corpus();
        let snap = index.snapshot();
        let q = parse_query("(term text:john)").unwrap();
        let out = search(&q, &BTreeMap::new(), &snap).unwrap();
        assert_eq!(out.results.len(), 2);
        assert!(out.results.iter().all(|r| r.distance.is_none()));
        assert_eq!(out.scanned_documents, 0);
        // Without distances, results order by doc_id.
        assert_eq!(out.results[0].doc_id, "decoy");
    }

    #[test]
    fn match_trace_records_the_winning_branches() {
        let index = fuzzy_corpus();
        let snap = index.snapshot();
        let q = parse_query("(or (term location:seattle) (nn m1 :radius 0.24))").unwrap();
        let out = search(&q, &embs(&[0.8, 0.6]), &snap).unwrap();
        assert_eq!(out.results.len(), 1);
        let MatchTrace::Or(branches) = &out.results[0].matched_via else {
            panic!("expected or trace");
        };
        assert_eq!(branches.len(), 2, "both branches matched the target");
        assert!(matches!(branches[0], MatchTrace::Term { .. }));
        assert!(matches!(branches[1], MatchTrace::Nn { .. }));
    }

    #[test]
    fn pq_mode_estimates_match_flat_exact_distances_closely() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let flat = Index::new();
        let pq = Index::new();
        for i in 0..300 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            for index in [&flat, &pq] {
                index
                    .add_document(doc_with_embedding(&format!("d{i:03}"), &[], &v))
                    .unwrap();
            }
        }
        flat.build_segment("m1", &flat_config(4, 4)).unwrap();
        pq.build_segment("m1", &AnnConfig { pq_bytes: 4, ..flat_config(4, 4) }).unwrap();
        let q = parse_query("(nn m1 :topk 10)").unwrap();
        let q_emb = embs(&[0.4, -0.1, 0.3, 0.7, -0.5, 0.2, 0.0, 0.6]);
        let exact = search(&q, &q_emb, &flat.snapshot()).unwrap();
        let approx = search(&q, &q_emb, &pq.snapshot()).unwrap();
        // The ADC estimate is noisy but must stay in range and land near
        // the exact distance for the same documents.
        for r in &approx.results {
            let d = r.distance.unwrap();
            assert!((0.0..=2.0).contains(&d));
        }
        let exact_top: Vec<&str> = exact.results.iter().map(|r| r.doc_id.as_str()).collect();
        let approx_top: Vec<&str> = approx.results.iter().map(|r| r.doc_id.as_str()).collect();
        let overlap = approx_top.iter().filter(|id| exact_top.contains(*id)).count();
        assert!(overlap >= 5, "top-10 overlap {overlap} too low");
    }
}
