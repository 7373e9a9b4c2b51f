//! Multi-model ensembles.
//!
//! Weighted concatenation serves several models in one index: the query
//! side concatenates each model's embedding scaled by its weight, the
//! document side concatenates them unscaled. Because every member
//! embedding is unit length, cosine against the concatenation recovers
//! the weighted sum of per-model cosines up to a fixed factor:
//!
//!   cos(E_Q, E_D) * sqrt(sum(alpha_i^2)) * sqrt(n) = sum(alpha_i * cos_i)
//!
//! so concat retrieval ranks exactly like the weighted score. Cascades
//! instead run a cheap model for candidates and a precise one to reorder
//! the top of the list.

use crate::encoder::TwoTower;
use crate::ModelError;
use embr_core::{cosine_distance, cosine_similarity, fnv1a64, DenseVector, Vector64};
use embr_engine::{search, IndexSnapshot, NnMode, QueryNode};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub id: String,
    pub towers: TwoTower,
}

/// Per-document embedding key for one ensemble member's doc tower.
pub fn member_embedding_key(id: &str) -> String {
    format!("model:{id}")
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<EnsembleMember>,
    weights: Vec<f64>,
}

impl Ensemble {
    pub fn new(members: Vec<EnsembleMember>, weights: Vec<f64>) -> Result<Self, ModelError> {
        if members.len() < 2 {
            return Err(ModelError::Config(
                "weighted concatenation needs at least 2 members".into(),
            ));
        }
        if weights.len() != members.len() {
            return Err(ModelError::Config(format!(
                "{} weights for {} members",
                weights.len(),
                members.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(ModelError::Config(format!(
                "member weights must be finite and positive, got {w}"
            )));
        }
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                if members[i].id == members[j].id {
                    return Err(ModelError::Config(format!(
                        "duplicate member id {:?}",
                        members[i].id
                    )));
                }
            }
        }
        Ok(Ensemble { members, weights })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index key for the concatenated document embedding; a fingerprint
    /// of member ids and weights, so different blends never collide.
    pub fn embedding_key(&self) -> String {
        let mut bytes = Vec::new();
        for (member, w) in self.members.iter().zip(&self.weights) {
            bytes.extend_from_slice(member.id.as_bytes());
            bytes.push(0xFF);
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        format!("ensemble:{:016x}", fnv1a64(&bytes))
    }

    /// Concatenation of weight-scaled member query embeddings.
    pub fn query_embedding(
        &self,
        record: &embr_engine::FeatureRecord,
    ) -> Result<Vector64, ModelError> {
        let mut out = Vec::new();
        for (member, &w) in self.members.iter().zip(&self.weights) {
            let e = member.towers.query.encode(record)?;
            out.extend(e.components().iter().map(|v| v * w));
        }
        Ok(DenseVector::new(out)?)
    }

    /// Concatenation of unscaled member document embeddings.
    pub fn document_embedding(
        &self,
        record: &embr_engine::FeatureRecord,
    ) -> Result<Vector64, ModelError> {
        let mut out = Vec::new();
        for member in &self.members {
            let e = member.towers.doc.encode(record)?;
            out.extend_from_slice(e.components());
        }
        Ok(DenseVector::new(out)?)
    }

    /// The weighted per-model score the concatenation trick reproduces.
    pub fn weighted_score(
        &self,
        query: &embr_engine::FeatureRecord,
        doc: &embr_engine::FeatureRecord,
    ) -> Result<f64, ModelError> {
        let mut score = 0.0;
        for (member, &w) in self.members.iter().zip(&self.weights) {
            let q = member.towers.query.encode(query)?;
            let d = member.towers.doc.encode(doc)?;
            score += w * cosine_similarity(&q, &d)?;
        }
        Ok(score)
    }
}

/// Two-stage retrieval: the stage-1 embedding fetches `rerank_depth`
/// candidates from its segment, then the stage-2 embedding reorders them
/// by true cosine distance (ties by doc_id). Every candidate must carry
/// the stage-2 embedding.
pub fn cascade_search(
    snapshot: &IndexSnapshot,
    stage1_key: &str,
    stage1_query: &Vector64,
    stage2_key: &str,
    stage2_query: &Vector64,
    rerank_depth: usize,
) -> Result<Vec<(String, f64)>, ModelError> {
    if rerank_depth == 0 {
        return Err(ModelError::Config("rerank_depth must be at least 1".into()));
    }
    let node = QueryNode::Nn {
        key: stage1_key.to_string(),
        mode: NnMode::TopK(rerank_depth),
        nprobe: None,
    };
    let embs = BTreeMap::from([(stage1_key.to_string(), stage1_query.clone())]);
    let outcome = search(&node, &embs, snapshot)?;

    let mut reranked = Vec::with_capacity(outcome.results.len());
    for result in outcome.results {
        let ordinal = snapshot
            .ordinal_of(&result.doc_id)
            .expect("stage-1 results are live");
        let doc = snapshot.document(ordinal).expect("stage-1 results are live");
        let stored = doc.embeddings.get(stage2_key).ok_or_else(|| {
            ModelError::Data(format!(
                "candidate {:?} has no {stage2_key:?} embedding to rerank with",
                result.doc_id
            ))
        })?;
        let widened = DenseVector::new(stored.to_f64_vec())?;
        let distance = cosine_distance(stage2_query, &widened)?;
        reranked.push((result.doc_id, distance));
    }
    reranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(reranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, DenseLayer, EncoderConfig, EncoderModel, TwoTower};
    use embr_core::{AnnConfig, TransformSpec, Vector32};
    use embr_engine::{Document, FeatureRecord, Index};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    /// A tower whose output is `matrix * v`, normalized: dense channel
    /// "v" through a single linear layer.
    fn linear_tower(matrix: &[[f64; 2]; 2]) -> TwoTower {
        let config = EncoderConfig {
            channels: BTreeMap::new(),
            dense: BTreeMap::from([("v".to_string(), 2)]),
            hidden_dim: 2,
            output_dim: 2,
        };
        let layer = DenseLayer {
            weights: matrix.iter().map(|row| row.to_vec()).collect(),
            bias: vec![0.0; 2],
            activation: Activation::Linear,
        };
        let model = EncoderModel::from_parts(config, BTreeMap::new(), vec![layer]).unwrap();
        TwoTower::from_parts(model.clone(), model, BTreeSet::new()).unwrap()
    }

    fn record(v: &[f64]) -> FeatureRecord {
        let mut rec = FeatureRecord::default();
        rec.dense.insert("v".to_string(), v.to_vec());
        rec
    }

    fn two_member_ensemble(weights: Vec<f64>) -> Ensemble {
        let identity = linear_tower(&[[1.0, 0.0], [0.0, 1.0]]);
        let swap = linear_tower(&[[0.0, 1.0], [1.0, 0.0]]);
        Ensemble::new(
            vec![
                EnsembleMember { id: "a".into(), towers: identity },
                EnsembleMember { id: "b".into(), towers: swap },
            ],
            weights,
        )
        .unwrap()
    }

    #[test]
    fn concatenation_matches_hand_computed_values() {
        let q = record(&[1.0, 0.0]);
        let ens = two_member_ensemble(vec![1.0, 1.0]);
        assert_eq!(ens.query_embedding(&q).unwrap().components(), [1.0, 0.0, 0.0, 1.0]);

        let ens2 = two_member_ensemble(vec![2.0, 1.0]);
        assert_eq!(ens2.query_embedding(&q).unwrap().components(), [2.0, 0.0, 0.0, 1.0]);

        let d = record(&[3.0, 4.0]);
        assert_eq!(
            ens2.document_embedding(&d).unwrap().components(),
            [0.6, 0.8, 0.8, 0.6],
            "doc side is unscaled: [3,4] normalizes to [0.6,0.8], then swapped"
        );
    }

    fn random_tower(rng: &mut ChaCha8Rng, dim: usize) -> TwoTower {
        let config = EncoderConfig {
            channels: BTreeMap::from([(
                "w".to_string(),
                crate::encoder::ChannelConfig { vocab_size: 6, table_dim: 4 },
            )]),
            dense: BTreeMap::from([("v".to_string(), 2)]),
            hidden_dim: 5,
            output_dim: dim,
        };
        TwoTower::init(config.clone(), config, BTreeSet::new(), rng.random()).unwrap()
    }

    fn random_record(rng: &mut ChaCha8Rng) -> FeatureRecord {
        let mut rec = FeatureRecord::default();
        rec.categorical.insert(
            "w".to_string(),
            (0..3).map(|_| (rng.random_range(0..6u32), rng.random_range(0.1..2.0))).collect(),
        );
        rec.dense.insert(
            "v".to_string(),
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        );
        rec
    }

    /// Unwraps unless the draw hit a dead ReLU layer, which is a valid
    /// encoder error, not an ensemble defect; those draws are skipped.
    fn skip_degenerate<T>(result: Result<T, crate::ModelError>) -> Option<T> {
        match result {
            Ok(v) => Some(v),
            Err(crate::ModelError::DegenerateEmbedding) => None,
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn concat_cosine_recovers_the_weighted_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut cases = 0;
        for _ in 0..200 {
            let n = rng.random_range(2..=3usize);
            let members: Vec<EnsembleMember> = (0..n)
                .map(|i| EnsembleMember {
                    id: format!("m{i}"),
                    towers: random_tower(&mut rng, 3),
                })
                .collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
            let ens = Ensemble::new(members, weights.clone()).unwrap();

            let q = random_record(&mut rng);
            let d = random_record(&mut rng);
            let Some(eq) = skip_degenerate(ens.query_embedding(&q)) else { continue };
            let Some(ed) = skip_degenerate(ens.document_embedding(&d)) else { continue };
            let alpha_norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
            let lhs = cosine_similarity(&eq, &ed).unwrap() * alpha_norm * (n as f64).sqrt();
            let rhs = ens.weighted_score(&q, &d).unwrap();
            assert!(
                (lhs - rhs).abs() < 1e-9,
                "case {cases}: concat cosine {lhs} vs weighted score {rhs}"
            );
            cases += 1;
        }
        assert!(cases >= 120, "only {cases} of 200 draws were usable");
    }

    #[test]
    fn concat_distance_ranks_documents_like_the_weighted_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        'attempt: for _ in 0..20 {
            let members: Vec<EnsembleMember> = (0..2)
                .map(|i| EnsembleMember {
                    id: format!("m{i}"),
                    towers: random_tower(&mut rng, 4),
                })
                .collect();
            let ens = Ensemble::new(members, vec![1.7, 0.4]).unwrap();
            let q = random_record(&mut rng);
            let Some(eq) = skip_degenerate(ens.query_embedding(&q)) else { continue 'attempt };

            let mut by_concat: Vec<(usize, f64)> = Vec::new();
            let mut by_score: Vec<(usize, f64)> = Vec::new();
            for _ in 0..30 {
                let d = random_record(&mut rng);
                let Some(ed) = skip_degenerate(ens.document_embedding(&d)) else { continue };
                let i = by_concat.len();
                by_concat.push((i, cosine_similarity(&eq, &ed).unwrap()));
                by_score.push((i, ens.weighted_score(&q, &d).unwrap()));
            }
            assert!(by_concat.len() >= 15, "too few usable documents");
            by_concat.sort_by(|a, b| b.1.total_cmp(&a.1));
            by_score.sort_by(|a, b| b.1.total_cmp(&a.1));
            let concat_order: Vec<usize> = by_concat.iter().map(|p| p.0).collect();
            let score_order: Vec<usize> = by_score.iter().map(|p| p.0).collect();
            assert_eq!(concat_order, score_order);
            return;
        }
        panic!("no attempt produced a usable query embedding");
    }

    #[test]
    fn invalid_ensembles_are_rejected() {
        let t = linear_tower(&[[1.0, 0.0], [0.0, 1.0]]);
        let member = |id: &str| EnsembleMember { id: id.into(), towers: t.clone() };

        assert!(Ensemble::new(vec![member("a")], vec![1.0]).is_err(), "single member");
        assert!(
            Ensemble::new(vec![member("a"), member("b")], vec![1.0]).is_err(),
            "weight count mismatch"
        );
        assert!(
            Ensemble::new(vec![member("a"), member("b")], vec![1.0, 0.0]).is_err(),
            "zero weight"
        );
        assert!(
            Ensemble::new(vec![member("a"), member("a")], vec![1.0, 1.0]).is_err(),
            "duplicate id"
        );
    }

    #[test]
    fn the_embedding_key_fingerprints_members_and_weights() {
        let a = two_member_ensemble(vec![1.0, 1.0]);
        let b = two_member_ensemble(vec![1.0, 1.0]);
        let c = two_member_ensemble(vec![2.0, 1.0]);
        assert_eq!(a.embedding_key(), b.embedding_key());
        assert_ne!(a.embedding_key(), c.embedding_key());
        assert!(a.embedding_key().starts_with("ensemble:"));
        assert_eq!(a.embedding_key().len(), "ensemble:".len() + 16);
        assert_eq!(member_embedding_key("a"), "model:a");
    }

    /// Index where stage-1 and stage-2 disagree: under s1 the decoy is
    /// closer to the query, under s2 the true match is.
    fn cascade_index() -> Index {
        let index = Index::new();
        let docs = [
            ("true-match", [1.0f32, 0.0], [1.0f32, 0.0]),
            ("decoy", [0.8, 0.6], [0.0, 1.0]),
            ("filler", [-1.0, 0.0], [-1.0, 0.0]),
        ];
        for (id, s1, s2) in docs {
            index
                .add_document(
                    Document::new(id)
                        .with_embedding("s1", Vector32::new(s1.to_vec()).unwrap())
                        .with_embedding("s2", Vector32::new(s2.to_vec()).unwrap()),
                )
                .unwrap();
        }
        let config = AnnConfig {
            num_clusters: 1,
            nprobe_default: 1,
            pq_bytes: 0,
            transform: TransformSpec::None,
            coarse_metric: Default::default(),
            seed: 0,
        };
        index.build_segment("s1", &config).unwrap();
        index
    }

    #[test]
    fn the_second_stage_reorders_the_first_stage_candidates() {
        let index = cascade_index();
        let snapshot = index.snapshot();
        // Stage-1 favors the decoy; stage-2 knows better.
        let q1 = DenseVector::new(vec![0.9, 0.44]).unwrap();
        let q2 = DenseVector::new(vec![1.0, 0.05]).unwrap();

        let top = cascade_search(&snapshot, "s1", &q1, "s2", &q2, 2).unwrap();
        let ids: Vec<&str> = top.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["true-match", "decoy"]);

        // Depth 1 never sees the true match: the cascade cannot recover
        // what stage 1 drops.
        let top1 = cascade_search(&snapshot, "s1", &q1, "s2", &q2, 1).unwrap();
        assert_eq!(top1[0].0, "decoy");
    }

    #[test]
    fn full_depth_cascade_equals_exact_ranking_under_stage_two() {
        let index = cascade_index();
        let snapshot = index.snapshot();
        let q1 = DenseVector::new(vec![0.2, 0.9]).unwrap();
        let q2 = DenseVector::new(vec![0.5, 0.5]).unwrap();
        let cascade = cascade_search(&snapshot, "s1", &q1, "s2", &q2, 10).unwrap();
        let exact = crate::eval::exact_knn(&snapshot, "s2", &q2, 10).unwrap();
        assert_eq!(cascade, exact);
    }

    #[test]
    fn candidates_without_the_rerank_embedding_are_an_error() {
        let index = cascade_index();
        index
            .add_document(
                Document::new("s1-only")
                    .with_embedding("s1", Vector32::new(vec![0.9, 0.44]).unwrap()),
            )
            .unwrap();
        let config = AnnConfig {
            num_clusters: 1,
            nprobe_default: 1,
            pq_bytes: 0,
            transform: TransformSpec::None,
            coarse_metric: Default::default(),
            seed: 0,
        };
        index.build_segment("s1", &config).unwrap();
        let snapshot = index.snapshot();
        let q = DenseVector::new(vec![1.0, 0.1]).unwrap();
        let err = cascade_search(&snapshot, "s1", &q, "s2", &q, 4).unwrap_err();
        assert!(err.to_string().contains("s1-only"), "{err}");
    }
}
