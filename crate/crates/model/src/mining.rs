//! Training-data mining: random negatives, online (in-batch) hard
//! negatives, offline rank-window hard negatives, and hard positives
//! recovered from failed search sessions.

use crate::ModelError;
use embr_core::{cosine_similarity, Vector64};
use embr_engine::FeatureRecord;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveSource {
    Clicks,
    Impressions,
    ClicksPlusHardPositives,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Random,
    NonClickImpressions,
    OnlineHard,
    OfflineHard,
    /// Random negatives with offline-hard negatives interleaved at
    /// `easy_to_hard_ratio`.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub positive_source: PositiveSource,
    pub negative_source: NegativeSource,
    /// Hard negatives per positive for online/offline mining, at most 2.
    pub hard_negatives_per_positive: usize,
    /// Random negatives per positive; the recall@(N/n) tradeoff knob.
    pub random_negatives_per_positive: usize,
    /// In mixed mode, one offline-hard triplet per this many random ones.
    pub easy_to_hard_ratio: f64,
    /// Offline mining samples from ranks [lo*N, hi*N] of the similarity
    /// ranking, as fractions of corpus size.
    pub offline_rank_window: (f64, f64),
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            positive_source: PositiveSource::Clicks,
            negative_source: NegativeSource::Random,
            hard_negatives_per_positive: 2,
            random_negatives_per_positive: 2,
            easy_to_hard_ratio: 100.0,
            // On a 10k corpus this window is ranks 101-500.
            offline_rank_window: (0.0101, 0.05),
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hard_negatives_per_positive == 0 || self.hard_negatives_per_positive > 2 {
            return Err(ModelError::Config(format!(
                "hard_negatives_per_positive is {}, must be 1 or 2",
                self.hard_negatives_per_positive
            )));
        }
        if self.random_negatives_per_positive == 0 {
            return Err(ModelError::Config(
                "random_negatives_per_positive must be at least 1".into(),
            ));
        }
        if !(self.easy_to_hard_ratio >= 1.0 && self.easy_to_hard_ratio.is_finite()) {
            return Err(ModelError::Config(format!(
                "easy_to_hard_ratio is {}, must be a finite value >= 1",
                self.easy_to_hard_ratio
            )));
        }
        let (lo, hi) = self.offline_rank_window;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(ModelError::Config(format!(
                "offline_rank_window ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
            )));
        }
        Ok(())
    }
}

/// Maps fractional window bounds to 1-indexed inclusive ranks over a
/// corpus of `n`. The epsilon nudges absorb binary-fraction rounding so
/// that e.g. (0.0101, 0.05) on n=10000 is exactly ranks 101..=500.
pub fn rank_window(lo: f64, hi: f64, n: usize) -> Result<(usize, usize), ModelError> {
    let lo_rank = ((lo * n as f64 - 1e-9).ceil().max(1.0)) as usize;
    let hi_rank = ((hi * n as f64 + 1e-9).floor()) as usize;
    let hi_rank = hi_rank.min(n);
    if n == 0 || lo_rank > hi_rank {
        return Err(ModelError::Data(format!(
            "rank window ({lo}, {hi}) is empty on a corpus of {n}"
        )));
    }
    Ok((lo_rank, hi_rank))
}

/// Uniform sample of `n` documents from the pool, without replacement,
/// excluding the positive. Deterministic given the rng state.
pub fn mine_random_negatives(
    pool: &[String],
    positive_id: &str,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, ModelError> {
    let mut candidates: Vec<&String> = pool.iter().filter(|id| *id != positive_id).collect();
    if candidates.len() < n {
        return Err(ModelError::Data(format!(
            "cannot sample {n} negatives from a pool of {} (positive excluded)",
            candidates.len()
        )));
    }
    // Partial Fisher-Yates: the first n slots become the sample.
    for k in 0..n {
        let j = rng.random_range(k..candidates.len());
        candidates.swap(k, j);
    }
    Ok(candidates[..n].iter().map(|s| s.to_string()).collect())
}

/// In-batch hard negatives: for query i, the `per_positive` other
/// positives with the highest cosine similarity under the current model.
/// Ties break toward the lower index. Returns negative indices per query.
pub fn mine_online_hard_negatives(
    query_embs: &[Vector64],
    positive_embs: &[Vector64],
    per_positive: usize,
) -> Result<Vec<Vec<usize>>, ModelError> {
    if per_positive == 0 || per_positive > 2 {
        return Err(ModelError::Config(format!(
            "per_positive is {per_positive}, must be 1 or 2"
        )));
    }
    let n = query_embs.len();
    if n != positive_embs.len() {
        return Err(ModelError::Data("query and positive batches differ in length".into()));
    }
    if n < 2 {
        return Err(ModelError::Data(
            "online hard-negative mining needs a batch of at least 2".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for (i, q) in query_embs.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| Ok((cosine_similarity(q, &positive_embs[j])?, j)))
            .collect::<Result<_, ModelError>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        out.push(scored.iter().take(per_positive).map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Offline hard negatives: rank every non-positive document by cosine
/// similarity to the query (ties by doc_id), then sample `per_query`
/// uniformly without replacement from the fractional rank window, which
/// is computed over the full corpus size and clamped to the candidate
/// count. Deterministic per seed.
pub fn mine_offline_hard_negatives(
    doc_ids: &[String],
    doc_embs: &[Vector64],
    queries: &[(Vector64, String)],
    window: (f64, f64),
    per_query: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>, ModelError> {
    if doc_ids.len() != doc_embs.len() {
        return Err(ModelError::Data("doc_ids and doc_embs differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(queries.len());
    for (query_emb, positive_id) in queries {
        let mut ranked: Vec<(f64, usize)> = doc_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| *id != positive_id)
            .map(|(j, _)| Ok((cosine_similarity(query_emb, &doc_embs[j])?, j)))
            .collect::<Result<_, ModelError>>()?;
        ranked.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| doc_ids[a.1].cmp(&doc_ids[b.1]))
        });
        let (lo_rank, hi_rank) = rank_window(window.0, window.1, doc_ids.len())?;
        let hi_rank = hi_rank.min(ranked.len());
        if lo_rank > hi_rank {
            return Err(ModelError::Data(format!(
                "rank window ({}, {}) is empty after clamping to {} candidates",
                window.0,
                window.1,
                ranked.len()
            )));
        }
        // Ranks are 1-indexed; the window slice is [lo_rank-1, hi_rank).
        let mut slots: Vec<usize> = (lo_rank - 1..hi_rank).collect();
        let take = per_query.min(slots.len());
        for k in 0..take {
            let j = rng.random_range(k..slots.len());
            slots.swap(k, j);
        }
        out.push(slots[..take].iter().map(|&s| doc_ids[ranked[s].1].clone()).collect());
    }
    Ok(out)
}

/// One synthetic search session: what was shown, what was clicked, and
/// whether the searcher later reached a result some other way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub query: FeatureRecord,
    pub impressed: Vec<String>,
    pub clicked: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub later_success: Option<String>,
}

impl SessionRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.query.validate()?;
        for id in &self.clicked {
            if !self.impressed.contains(id) {
                return Err(ModelError::Data(format!(
                    "clicked {id:?} was never impressed"
                )));
            }
        }
        Ok(())
    }
}

/// Failed-session positives: sessions with impressions but no click,
/// where a later success landed on a document that was never impressed,
/// yield (query, that document) pairs.
pub fn mine_hard_positives(sessions: &[SessionRecord]) -> Vec<(FeatureRecord, String)> {
    sessions
        .iter()
        .filter(|s| s.clicked.is_empty())
        .filter_map(|s| {
            s.later_success
                .as_ref()
                .filter(|id| !s.impressed.contains(id))
                .map(|id| (s.query.clone(), id.clone()))
        })
        .collect()
}

pub fn read_session_log(path: &Path) -> Result<Vec<SessionRecord>, ModelError> {
    let file = std::fs::File::open(path)?;
    let mut sessions = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let session: SessionRecord =
            serde_json::from_str(&line).map_err(|e| ModelError::Format {
                file: format!("{}", path.display()),
                message: format!("line {}: {e}", lineno + 1),
            })?;
        session.validate().map_err(|e| ModelError::Format {
            file: format!("{}", path.display()),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        sessions.push(session);
    }
    Ok(sessions)
}

pub fn write_session_log(path: &Path, sessions: &[SessionRecord]) -> Result<(), ModelError> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use embr_core::DenseVector;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i:03}")).collect()
    }

    #[test]
    fn window_mapping_hits_the_canonical_ranks() {
        assert_eq!(rank_window(0.0101, 0.05, 10000).unwrap(), (101, 500));
        assert_eq!(rank_window(0.0, 0.001, 1000).unwrap(), (1, 1));
        assert_eq!(rank_window(0.5, 1.0, 10).unwrap(), (5, 10));
        assert!(matches!(rank_window(0.91, 0.99, 10), Err(ModelError::Data(_))));
        assert!(matches!(rank_window(0.1, 0.2, 0), Err(ModelError::Data(_))));
    }

    #[test]
    fn random_mining_exhausts_a_small_pool() {
        let pool = ids(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut negs = mine_random_negatives(&pool, "d003", 9, &mut rng).unwrap();
        negs.sort();
        let want: Vec<String> = pool.iter().filter(|s| *s != "d003").cloned().collect();
        assert_eq!(negs, want);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(mine_random_negatives(&pool, "d003", 10, &mut rng).is_err());
    }

    #[test]
    fn random_mining_is_deterministic_per_seed() {
        let pool = ids(50);
        let a = mine_random_negatives(&pool, "d000", 5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = mine_random_negatives(&pool, "d000", 5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn random_mining_is_uniform_over_many_draws() {
        let pool = ids(11);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::BTreeMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            let neg = mine_random_negatives(&pool, "d000", 1, &mut rng).unwrap();
            *counts.entry(neg[0].clone()).or_insert(0usize) += 1;
        }
        assert!(!counts.contains_key("d000"));
        // 10 candidates: expect 10000 each, sigma = sqrt(n*p*(1-p)) ~ 94.9.
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for (id, count) in counts {
            let dev = (count as f64 - 10_000.0).abs();
            assert!(dev <= 3.0 * sigma, "{id}: count {count} deviates {dev:.0}");
        }
    }

    fn unit(v: &[f64]) -> Vector64 {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        DenseVector::new(v.iter().map(|x| x / n).collect()).unwrap()
    }

    #[test]
    fn online_mining_picks_the_most_similar_other_positives() {
        // q0 is closest to p2, then p1.
        let queries = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        let positives = vec![unit(&[1.0, 0.1]), unit(&[0.5, 1.0]), unit(&[0.9, 0.1])];
        // Brute-force oracle for q0 over {p1, p2}.
        let s1 = cosine_similarity(&queries[0], &positives[1]).unwrap();
        let s2 = cosine_similarity(&queries[0], &positives[2]).unwrap();
        assert!(s2 > s1);

        let picks = mine_online_hard_negatives(&queries, &positives, 1).unwrap();
        assert_eq!(picks[0], vec![2]);
        let picks = mine_online_hard_negatives(&queries, &positives, 2).unwrap();
        assert_eq!(picks[0], vec![2, 1]);
        // Batch of 3 with per_positive=2 exhausts the pool for each query.
        for (i, p) in picks.iter().enumerate() {
            assert_eq!(p.len(), 2);
            assert!(!p.contains(&i));
        }
    }

    #[test]
    fn online_mining_breaks_ties_toward_the_lower_index() {
        let q = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 2.0])];
        let same = unit(&[0.6, 0.8]);
        let positives = vec![same.clone(), same.clone(), same];
        let picks = mine_online_hard_negatives(&q, &positives, 2).unwrap();
        assert_eq!(picks[0], vec![1, 2]);
        assert_eq!(picks[1], vec![0, 2]);
        assert_eq!(picks[2], vec![0, 1]);
    }

    #[test]
    fn online_mining_rejects_bad_shapes() {
        let q = vec![unit(&[1.0, 0.0])];
        assert!(mine_online_hard_negatives(&q, &q.clone(), 1).is_err(), "batch of 1");
        let q2 = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        assert!(
            matches!(
                mine_online_hard_negatives(&q2, &q2.clone(), 3),
                Err(ModelError::Config(_))
            ),
            "per_positive 3 exceeds the at-most-2 rule"
        );
    }

    #[test]
    fn offline_mining_respects_the_window_and_excludes_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let doc_ids = ids(n);
        let doc_embs: Vec<Vector64> = (0..n)
            .map(|_| unit(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let queries: Vec<(Vector64, String)> = (0..100)
            .map(|i| {
                let v = unit(&[
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]);
                (v, format!("d{:03}", i % n))
            })
            .collect();
        let window = (0.02, 0.1);
        let mined =
            mine_offline_hard_negatives(&doc_ids, &doc_embs, &queries, window, 3, 11).unwrap();

        let (lo, hi) = rank_window(window.0, window.1, n).unwrap();
        for ((query_emb, positive), negs) in queries.iter().zip(&mined) {
            assert_eq!(negs.len(), 3);
            // Re-rank with an exact oracle and verify each pick's rank.
            let mut ranked: Vec<(f64, &String)> = doc_ids
                .iter()
                .zip(&doc_embs)
                .filter(|(id, _)| *id != positive)
                .map(|(id, e)| (cosine_similarity(query_emb, e).unwrap(), id))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            for neg in negs {
                assert_ne!(neg, positive);
                let rank = ranked.iter().position(|(_, id)| *id == neg).unwrap() + 1;
                assert!(
                    (lo..=hi).contains(&rank),
                    "rank {rank} outside [{lo}, {hi}]"
                );
            }
        }
    }

    #[test]
    fn offline_window_at_the_top_returns_the_hardest_example() {
        let doc_ids = ids(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let doc_embs: Vec<Vector64> = (0..1000)
            .map(|_| unit(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let query = (unit(&[0.7, 0.3]), "d000".to_string());
        let mined = mine_offline_hard_negatives(
            &doc_ids,
            &doc_embs,
            std::slice::from_ref(&query),
            (0.0, 0.001),
            5,
            0,
        )
        .unwrap();
        // Window is rank 1..=1: exactly the single most similar non-positive.
        let best = doc_ids
            .iter()
            .zip(&doc_embs)
            .filter(|(id, _)| *id != "d000")
            .max_by(|a, b| {
                cosine_similarity(&query.0, a.1)
                    .unwrap()
                    .total_cmp(&cosine_similarity(&query.0, b.1).unwrap())
                    .then_with(|| b.0.cmp(a.0))
            })
            .unwrap()
            .0;
        assert_eq!(mined[0], vec![best.clone()]);
    }

    #[test]
    fn hard_positives_come_only_from_failed_sessions() {
        let record = FeatureRecord::default();
        let sessions = vec![
            // No click, later success off the impression list: emitted.
            SessionRecord {
                query: record.clone(),
                impressed: vec!["a".into(), "b".into()],
                clicked: vec![],
                later_success: Some("c".into()),
            },
            // Clicked: not a failure.
            SessionRecord {
                query: record.clone(),
                impressed: vec!["a".into()],
                clicked: vec!["a".into()],
                later_success: Some("c".into()),
            },
            // Later success was already impressed: not a discovery.
            SessionRecord {
                query: record.clone(),
                impressed: vec!["a".into(), "c".into()],
                clicked: vec![],
                later_success: Some("c".into()),
            },
            // No later success signal at all.
            SessionRecord {
                query: record.clone(),
                impressed: vec!["a".into()],
                clicked: vec![],
                later_success: None,
            },
        ];
        let pairs = mine_hard_positives(&sessions);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].1, "c");
    }

    #[test]
    fn session_log_round_trips_and_rejects_clicks_without_impressions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.jsonl");
        let sessions = vec![SessionRecord {
            query: FeatureRecord::default(),
            impressed: vec!["a".into()],
            clicked: vec!["a".into()],
            later_success: None,
        }];
        write_session_log(&path, &sessions).unwrap();
        assert_eq!(read_session_log(&path).unwrap(), sessions);

        std::fs::write(
            &path,
            r#"{"query":{},"impressed":[],"clicked":["ghost"]}"#,
        )
        .unwrap();
        let err = read_session_log(&path).unwrap_err();
        assert!(matches!(err, ModelError::Format { .. }), "{err}");
        assert!(err.to_string().contains("line 1"));
    }
}
