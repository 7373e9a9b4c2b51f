//! Two-tower training: triplet-loss SGD over click/impression pairs with
//! pluggable negative mining.

use crate::encoder::TwoTower;
use crate::loss::{triplet_loss, Triplet, TripletBatch};
use crate::mining::{
    mine_hard_positives, mine_offline_hard_negatives, mine_online_hard_negatives,
    mine_random_negatives, MiningConfig, NegativeSource, PositiveSource, SessionRecord,
};
use crate::ModelError;
use embr_core::Vector64;
use embr_engine::FeatureRecord;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Click,
    Impression,
    HardPositive,
}

/// One (query, positive document) training pair. Non-click impressions
/// from the same result page ride along for the impression-negative mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub query: FeatureRecord,
    pub positive_id: String,
    pub label_source: LabelSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub non_click_impressions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { lr: 0.1, batch_size: 32, epochs: 5, margin: 0.1, seed: 0 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ModelError::Config(format!("lr {} must be finite and positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return Err(ModelError::Config(format!("margin {} outside (0, 2)", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per triplet term, one entry per epoch.
    pub loss_curve: Vec<f64>,
    /// Training pairs actually used after positive-source selection.
    pub examples_used: usize,
    /// Total (query, positive, negative) terms over all epochs.
    pub triplet_terms: usize,
}

/// Chunks `0..n` into batches of `size`, merging a trailing singleton
/// into the previous batch so in-batch mining always sees at least two
/// examples (except when n == 1).
fn batch_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    let mut ranges: Vec<Range<usize>> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        ranges.push(start..end);
        start = end;
    }
    if ranges.len() > 1 && ranges.last().unwrap().len() == 1 {
        let last = ranges.pop().unwrap();
        ranges.last_mut().unwrap().end = last.end;
    }
    ranges
}

/// Splitmix-style stride keeps per-epoch mining seeds decorrelated.
fn epoch_seed(base: u64, epoch: usize) -> u64 {
    base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

pub fn train(
    two: &mut TwoTower,
    corpus: &BTreeMap<String, FeatureRecord>,
    examples: &[TrainExample],
    sessions: &[SessionRecord],
    mining: &MiningConfig,
    hp: &Hyperparams,
) -> Result<TrainReport, ModelError> {
    hp.validate()?;
    mining.validate()?;

    let mut work: Vec<TrainExample> = examples
        .iter()
        .filter(|ex| match mining.positive_source {
            PositiveSource::Clicks => ex.label_source == LabelSource::Click,
            PositiveSource::Impressions => {
                matches!(ex.label_source, LabelSource::Click | LabelSource::Impression)
            }
            PositiveSource::ClicksPlusHardPositives => {
                matches!(ex.label_source, LabelSource::Click | LabelSource::HardPositive)
            }
        })
        .cloned()
        .collect();
    if mining.positive_source == PositiveSource::ClicksPlusHardPositives {
        for (query, positive_id) in mine_hard_positives(sessions) {
            work.push(TrainExample {
                query,
                positive_id,
                label_source: LabelSource::HardPositive,
                non_click_impressions: Vec::new(),
            });
        }
    }
    if work.is_empty() {
        return Err(ModelError::Data(
            "no training examples match the configured positive source".into(),
        ));
    }

    let positive_records: Vec<&FeatureRecord> = work
        .iter()
        .map(|ex| {
            corpus.get(&ex.positive_id).ok_or_else(|| {
                ModelError::Data(format!("positive {:?} is not in the corpus", ex.positive_id))
            })
        })
        .collect::<Result<_, _>>()?;

    let in_batch = matches!(mining.negative_source, NegativeSource::OnlineHard);
    if in_batch && (work.len() < 2 || hp.batch_size < 2) {
        return Err(ModelError::Config(
            "in-batch hard negatives need batch_size >= 2 and at least 2 examples".into(),
        ));
    }

    let doc_ids: Vec<String> = corpus.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mixed_period = mining.easy_to_hard_ratio.round() as usize + 1;
    let mut mixed_counter: usize = 0;

    let mut loss_curve = Vec::with_capacity(hp.epochs);
    let mut total_terms = 0usize;

    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..work.len()).collect();
        order.shuffle(&mut rng);

        // Offline mining re-ranks against the current doc tower each epoch.
        // Mixed mode draws its hard slots from the same ranking.
        let offline_negs: Vec<Vec<String>> = if matches!(
            mining.negative_source,
            NegativeSource::OfflineHard | NegativeSource::Mixed
        ) {
            let doc_embs: Vec<Vector64> = corpus
                .values()
                .map(|r| two.doc.encode(r))
                .collect::<Result<_, _>>()?;
            let queries: Vec<(Vector64, String)> = work
                .iter()
                .map(|ex| Ok((two.query.encode(&ex.query)?, ex.positive_id.clone())))
                .collect::<Result<_, ModelError>>()?;
            mine_offline_hard_negatives(
                &doc_ids,
                &doc_embs,
                &queries,
                mining.offline_rank_window,
                mining.hard_negatives_per_positive,
                epoch_seed(hp.seed, epoch),
            )?
        } else {
            Vec::new()
        };

        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        for (batch_idx, range) in batch_ranges(order.len(), hp.batch_size).into_iter().enumerate() {
            let batch: Vec<usize> = order[range].to_vec();

            let online_picks: Option<Vec<Vec<usize>>> = if in_batch {
                let query_embs: Vec<Vector64> = batch
                    .iter()
                    .map(|&i| two.query.encode(&work[i].query))
                    .collect::<Result<_, _>>()?;
                let pos_embs: Vec<Vector64> = batch
                    .iter()
                    .map(|&i| two.doc.encode(positive_records[i]))
                    .collect::<Result<_, _>>()?;
                Some(mine_online_hard_negatives(
                    &query_embs,
                    &pos_embs,
                    mining.hard_negatives_per_positive,
                )?)
            } else {
                None
            };

            let mut triplets = Vec::with_capacity(batch.len());
            for (slot, &i) in batch.iter().enumerate() {
                let ex = &work[i];
                let negatives: Vec<&FeatureRecord> = match mining.negative_source {
                    NegativeSource::Random => {
                        mine_random_negatives(
                            &doc_ids,
                            &ex.positive_id,
                            mining.random_negatives_per_positive,
                            &mut rng,
                        )?
                        .iter()
                        .map(|id| &corpus[id])
                        .collect()
                    }
                    NegativeSource::NonClickImpressions => {
                        if ex.non_click_impressions.is_empty() {
                            return Err(ModelError::Data(format!(
                                "example with positive {:?} has no non-click impressions",
                                ex.positive_id
                            )));
                        }
                        ex.non_click_impressions
                            .iter()
                            .map(|id| {
                                corpus.get(id).ok_or_else(|| {
                                    ModelError::Data(format!(
                                        "non-click impression {id:?} is not in the corpus"
                                    ))
                                })
                            })
                            .collect::<Result<_, _>>()?
                    }
                    NegativeSource::OnlineHard => online_picks.as_ref().unwrap()[slot]
                        .iter()
                        .map(|&j| positive_records[batch[j]])
                        .collect(),
                    NegativeSource::OfflineHard => {
                        offline_negs[i].iter().map(|id| &corpus[id]).collect()
                    }
                    NegativeSource::Mixed => {
                        let hard = mixed_counter % mixed_period == 0;
                        mixed_counter += 1;
                        if hard {
                            offline_negs[i].iter().map(|id| &corpus[id]).collect()
                        } else {
                            mine_random_negatives(
                                &doc_ids,
                                &ex.positive_id,
                                mining.random_negatives_per_positive,
                                &mut rng,
                            )?
                            .iter()
                            .map(|id| &corpus[id])
                            .collect()
                        }
                    }
                };
                triplets.push(Triplet {
                    query: &ex.query,
                    positive: positive_records[i],
                    negatives,
                });
            }

            let triplet_batch = TripletBatch { triplets, margin: hp.margin };
            let num_terms = triplet_batch.num_terms();
            let (loss, query_grads, doc_grads) = match triplet_loss(two, &triplet_batch) {
                Ok(out) => out,
                // A blown-up tower shows first as a non-finite embedding.
                Err(ModelError::DegenerateEmbedding) => {
                    return Err(ModelError::Divergence { epoch, batch: batch_idx })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(ModelError::Divergence { epoch, batch: batch_idx });
            }
            // Gradients are averaged over triplet terms, so the step size
            // is insensitive to batch size and negatives-per-positive.
            two.apply_gradients(&query_grads, &doc_grads, hp.lr / num_terms as f64);

            epoch_loss += loss;
            epoch_terms += num_terms;
            total_terms += num_terms;
        }
        loss_curve.push(epoch_loss / epoch_terms as f64);
    }

    Ok(TrainReport { loss_curve, examples_used: work.len(), triplet_terms: total_terms })
}

pub fn read_train_examples(path: &Path) -> Result<Vec<TrainExample>, ModelError> {
    let file = std::fs::File::open(path)?;
    let mut examples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainExample = serde_json::from_str(&line).map_err(|e| ModelError::Format {
            file: format!("{}", path.display()),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        ex.query.validate().map_err(|e| ModelError::Format {
            file: format!("{}", path.display()),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        if ex.positive_id.is_empty() {
            return Err(ModelError::Format {
                file: format!("{}", path.display()),
                message: format!("line {}: empty positive_id", lineno + 1),
            });
        }
        examples.push(ex);
    }
    Ok(examples)
}

pub fn write_train_examples(path: &Path, examples: &[TrainExample]) -> Result<(), ModelError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(|e| ModelError::Format {
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
    use crate::encoder::{ChannelConfig, EncoderConfig};
    use std::collections::BTreeSet;

    fn word_record(ids: &[u32]) -> FeatureRecord {
        let mut rec = FeatureRecord::default();
        rec.categorical
            .insert("w".to_string(), ids.iter().map(|&id| (id, 1.0)).collect());
        rec
    }

    /// Corpus of n one-hot documents; queries repeat the positive's record
    /// so the task is pure identity matching.
    fn toy_problem(n: usize) -> (BTreeMap<String, FeatureRecord>, Vec<TrainExample>) {
        let corpus: BTreeMap<String, FeatureRecord> = (0..n)
            .map(|i| (format!("d{i}"), word_record(&[i as u32])))
            .collect();
        let examples = (0..n)
            .map(|i| TrainExample {
                query: word_record(&[i as u32]),
                positive_id: format!("d{i}"),
                label_source: LabelSource::Click,
                non_click_impressions: vec![format!("d{}", (i + 1) % n)],
            })
            .collect();
        (corpus, examples)
    }

    fn toy_tower(vocab: usize, seed: u64) -> TwoTower {
        let config = EncoderConfig {
            channels: BTreeMap::from([(
                "w".to_string(),
                ChannelConfig { vocab_size: vocab, table_dim: 8 },
            )]),
            dense: BTreeMap::new(),
            hidden_dim: 8,
            output_dim: 4,
        };
        TwoTower::init(config.clone(), config, BTreeSet::new(), seed).unwrap()
    }

    #[test]
    fn batching_never_leaves_a_singleton_tail() {
        assert_eq!(batch_ranges(7, 3), vec![0..3, 3..7]);
        assert_eq!(batch_ranges(6, 3), vec![0..3, 3..6]);
        assert_eq!(batch_ranges(4, 4), vec![0..4]);
        assert_eq!(batch_ranges(1, 3), vec![0..1]);
        assert_eq!(batch_ranges(5, 2), vec![0..2, 2..5]);
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let (corpus, examples) = toy_problem(6);
        let mut two = toy_tower(8, 1);
        let before = two.clone();
        let hp = Hyperparams { epochs: 0, ..Hyperparams::default() };
        let report =
            train(&mut two, &corpus, &examples, &[], &MiningConfig::default(), &hp).unwrap();
        assert!(report.loss_curve.is_empty());
        assert_eq!(report.triplet_terms, 0);
        assert_eq!(two.query.tables(), before.query.tables());
        assert_eq!(two.doc.layers(), before.doc.layers());
    }

    #[test]
    fn training_is_bit_deterministic_per_seed() {
        let (corpus, examples) = toy_problem(6);
        let hp = Hyperparams { epochs: 3, batch_size: 4, lr: 0.3, margin: 0.2, seed: 7 };
        let mining = MiningConfig {
            negative_source: NegativeSource::Mixed,
            easy_to_hard_ratio: 2.0,
            // Wide enough to be nonempty on the 6-document toy corpus.
            offline_rank_window: (0.1, 0.6),
            ..MiningConfig::default()
        };
        let mut a = toy_tower(8, 5);
        let mut b = toy_tower(8, 5);
        let ra = train(&mut a, &corpus, &examples, &[], &mining, &hp).unwrap();
        let rb = train(&mut b, &corpus, &examples, &[], &mining, &hp).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.query.tables(), b.query.tables());
        assert_eq!(a.doc.tables(), b.doc.tables());
        assert_eq!(a.query.layers(), b.query.layers());
    }

    #[test]
    fn loss_falls_on_an_identity_matching_task() {
        let (corpus, examples) = toy_problem(8);
        let mut two = toy_tower(10, 3);
        let hp = Hyperparams { epochs: 100, batch_size: 4, lr: 1.0, margin: 0.4, seed: 2 };
        let report =
            train(&mut two, &corpus, &examples, &[], &MiningConfig::default(), &hp).unwrap();
        let first = report.loss_curve[0];
        let last = *report.loss_curve.last().unwrap();
        assert!(
            last < 0.5 * first,
            "loss did not fall: first {first}, last {last}"
        );
    }

    #[test]
    fn every_negative_source_runs_and_agrees_on_the_report_shape() {
        let (corpus, examples) = toy_problem(10);
        for source in [
            NegativeSource::Random,
            NegativeSource::NonClickImpressions,
            NegativeSource::OnlineHard,
            NegativeSource::OfflineHard,
            NegativeSource::Mixed,
        ] {
            let mut two = toy_tower(12, 4);
            // The offline window must be wide enough to be nonempty on a
            // 10-document corpus.
            let mining = MiningConfig {
                negative_source: source,
                offline_rank_window: (0.1, 0.5),
                ..MiningConfig::default()
            };
            let hp = Hyperparams { epochs: 2, batch_size: 4, ..Hyperparams::default() };
            let report = train(&mut two, &corpus, &examples, &[], &mining, &hp)
                .unwrap_or_else(|e| panic!("{source:?}: {e}"));
            assert_eq!(report.loss_curve.len(), 2);
            assert_eq!(report.examples_used, 10);
            assert!(report.triplet_terms > 0);
        }
    }

    #[test]
    fn hard_positives_from_sessions_join_the_training_set() {
        let (corpus, examples) = toy_problem(6);
        let sessions = vec![SessionRecord {
            query: word_record(&[3]),
            impressed: vec!["d0".into(), "d1".into()],
            clicked: vec![],
            later_success: Some("d3".into()),
        }];
        let mut two = toy_tower(8, 1);
        let mining = MiningConfig {
            positive_source: PositiveSource::ClicksPlusHardPositives,
            ..MiningConfig::default()
        };
        let hp = Hyperparams { epochs: 1, ..Hyperparams::default() };
        let report = train(&mut two, &corpus, &examples, &sessions, &mining, &hp).unwrap();
        assert_eq!(report.examples_used, 7);
    }

    #[test]
    fn blown_up_parameters_surface_as_divergence() {
        let (corpus, examples) = toy_problem(6);
        let mut two = toy_tower(8, 1);
        let hp = Hyperparams { epochs: 50, lr: 1e300, batch_size: 3, ..Hyperparams::default() };
        match train(&mut two, &corpus, &examples, &[], &MiningConfig::default(), &hp) {
            Err(ModelError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn impression_negatives_require_the_impression_list() {
        let corpus = BTreeMap::from([
            ("d0".to_string(), word_record(&[0])),
            ("d1".to_string(), word_record(&[1])),
        ]);
        let examples = vec![TrainExample {
            query: word_record(&[0]),
            positive_id: "d0".into(),
            label_source: LabelSource::Click,
            non_click_impressions: vec![],
        }];
        let mut two = toy_tower(4, 0);
        let mining = MiningConfig {
            negative_source: NegativeSource::NonClickImpressions,
            ..MiningConfig::default()
        };
        let hp = Hyperparams { epochs: 1, ..Hyperparams::default() };
        let err = train(&mut two, &corpus, &examples, &[], &mining, &hp).unwrap_err();
        assert!(matches!(err, ModelError::Data(_)), "{err}");
    }

    #[test]
    fn unknown_positive_ids_are_rejected_up_front() {
        let (corpus, mut examples) = toy_problem(4);
        examples[2].positive_id = "ghost".into();
        let mut two = toy_tower(6, 0);
        let hp = Hyperparams { epochs: 1, ..Hyperparams::default() };
        let err = train(&mut two, &corpus, &examples, &[], &MiningConfig::default(), &hp)
            .unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn examples_round_trip_through_jsonl() {
        let (_, examples) = toy_problem(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_train_examples(&path, &examples).unwrap();
        assert_eq!(read_train_examples(&path).unwrap(), examples);

        // The optional impression list is omitted when empty and defaults
        // to empty when absent.
        let line = r#"{"query":{},"positive_id":"d1","label_source":"click"}"#;
        std::fs::write(&path, line).unwrap();
        let read = read_train_examples(&path).unwrap();
        assert!(read[0].non_click_impressions.is_empty());
        write_train_examples(&path, &read).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), line);
    }
}
