//! Synthetic people-search data: a directory of named profiles with
//! cities and group memberships, click/impression training pairs whose
//! confusables make plausible negatives, session logs with a controlled
//! failure rate, labeled evaluation queries, and one planted fuzzy-match
//! scenario (a misspelled query that term search cannot satisfy).

use crate::encoder::{ChannelConfig, EncoderConfig};
use crate::eval::EvalSession;
use crate::features::{
    extract_text_features, CHAR_TRIGRAMS_CHANNEL, TRIGRAM_VOCAB_SIZE, WORD_HASH_SPACE,
    WORD_NGRAMS_CHANNEL,
};
use crate::mining::SessionRecord;
use crate::train::{LabelSource, TrainExample};
use crate::ModelError;
use embr_engine::{Document, FeatureRecord};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const CITY_CHANNEL: &str = "city";
pub const SOCIAL_CHANNEL: &str = "social";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_docs: usize,
    /// Name-pool communities; names repeat within a community and the
    /// shared surname pool creates cross-community collisions.
    pub num_communities: usize,
    pub num_cities: usize,
    pub num_groups: usize,
    /// Fraction of profiles drawing their surname from the shared pool.
    pub name_collision_rate: f64,
    /// Fraction of sessions that fail (no click, later success off-list).
    pub failure_rate: f64,
    pub train_pairs: usize,
    pub num_sessions: usize,
    pub eval_sessions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_docs: 2000,
            num_communities: 25,
            num_cities: 30,
            num_groups: 100,
            name_collision_rate: 0.35,
            failure_rate: 0.04,
            train_pairs: 2000,
            num_sessions: 500,
            eval_sessions: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_docs < 10 {
            return Err(ModelError::Config("num_docs must be at least 10".into()));
        }
        if self.num_communities == 0 || self.num_groups == 0 {
            return Err(ModelError::Config("communities and groups must be nonzero".into()));
        }
        if self.num_cities < 3 {
            return Err(ModelError::Config(
                "num_cities must be at least 3 so the planted decoys get distinct cities".into(),
            ));
        }
        for (name, rate) in [
            ("name_collision_rate", self.name_collision_rate),
            ("failure_rate", self.failure_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(ModelError::Config(format!("{name} {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The planted misspelling: `query_text` shares trigrams and context
/// with the target but none of its tokens match the target's terms, so
/// the Boolean `term_query` cannot find it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyScenario {
    pub target_id: String,
    pub decoy_ids: Vec<String>,
    pub query: FeatureRecord,
    pub query_text: String,
    pub term_query: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: Vec<Document>,
    pub train: Vec<TrainExample>,
    pub sessions: Vec<SessionRecord>,
    pub eval: Vec<EvalSession>,
    pub fuzzy: FuzzyScenario,
}

/// Encoder layout matching the channels `generate` emits. Text channels
/// are shared between towers; city and social stay tower-local because
/// searcher context and profile attributes play different roles.
pub fn encoder_config(config: &SynthConfig) -> (EncoderConfig, BTreeSet<String>) {
    let channels = BTreeMap::from([
        (
            CHAR_TRIGRAMS_CHANNEL.to_string(),
            ChannelConfig { vocab_size: TRIGRAM_VOCAB_SIZE, table_dim: 16 },
        ),
        (
            WORD_NGRAMS_CHANNEL.to_string(),
            ChannelConfig { vocab_size: WORD_HASH_SPACE, table_dim: 16 },
        ),
        (
            CITY_CHANNEL.to_string(),
            ChannelConfig { vocab_size: config.num_cities + 1, table_dim: 8 },
        ),
        (
            SOCIAL_CHANNEL.to_string(),
            ChannelConfig { vocab_size: config.num_groups + 1, table_dim: 8 },
        ),
    ]);
    let encoder = EncoderConfig {
        channels,
        dense: BTreeMap::new(),
        hidden_dim: 64,
        output_dim: 32,
    };
    let shared = BTreeSet::from([
        CHAR_TRIGRAMS_CHANNEL.to_string(),
        WORD_NGRAMS_CHANNEL.to_string(),
    ]);
    (encoder, shared)
}

const CONSONANTS: &[&str] =
    &["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn syllable(rng: &mut ChaCha8Rng) -> String {
    let c = CONSONANTS.choose(rng).unwrap();
    let v = VOWELS.choose(rng).unwrap();
    format!("{c}{v}")
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w: String = (0..syllables).map(|_| syllable(rng)).collect();
    if rng.random_bool(0.3) {
        w.push_str(CONSONANTS.choose(rng).unwrap());
    }
    w
}

/// One plausible misspelling: swap, drop, or double a letter.
fn misspell(rng: &mut ChaCha8Rng, token: &str) -> String {
    let chars: Vec<char> = token.chars().collect();
    match rng.random_range(0..3) {
        0 if chars.len() >= 2 => {
            let i = rng.random_range(0..chars.len() - 1);
            let mut out = chars.clone();
            out.swap(i, i + 1);
            out.into_iter().collect()
        }
        1 if chars.len() >= 3 => {
            let i = rng.random_range(0..chars.len());
            chars.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, c)| c).collect()
        }
        _ => {
            let i = rng.random_range(0..chars.len());
            let mut out: String = chars[..=i].iter().collect();
            out.push(chars[i]);
            out.extend(chars[i + 1..].iter());
            out
        }
    }
}

struct Profile {
    name: String,
    city: u32,
    groups: Vec<u32>,
}

fn profile_record(p: &Profile) -> FeatureRecord {
    let mut categorical = extract_text_features(&p.name);
    categorical.insert(CITY_CHANNEL.to_string(), vec![(p.city, 1.0)]);
    categorical
        .insert(SOCIAL_CHANNEL.to_string(), p.groups.iter().map(|&g| (g, 1.0)).collect());
    FeatureRecord {
        text_fields: BTreeMap::from([("name".to_string(), p.name.clone())]),
        categorical,
        dense: BTreeMap::new(),
    }
}

fn query_record(text: &str, city: u32, groups: &[u32]) -> FeatureRecord {
    let mut categorical = extract_text_features(text);
    categorical.insert(CITY_CHANNEL.to_string(), vec![(city, 1.0)]);
    categorical
        .insert(SOCIAL_CHANNEL.to_string(), groups.iter().map(|&g| (g, 1.0)).collect());
    FeatureRecord {
        text_fields: BTreeMap::from([("query".to_string(), text.to_string())]),
        categorical,
        dense: BTreeMap::new(),
    }
}

fn doc_for(id: &str, p: &Profile) -> Document {
    let mut doc = Document::new(id);
    for token in p.name.split_whitespace() {
        doc = doc.with_term("text", token);
    }
    doc = doc.with_term("city", &format!("c{}", p.city));
    doc.features = profile_record(p);
    doc
}

pub fn generate(config: &SynthConfig) -> Result<SynthData, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Name pools: per-community first and last names, plus the shared
    // surname pool that creates cross-community collisions.
    let shared_surnames: Vec<String> = (0..6).map(|_| word(&mut rng)).collect();
    let firsts: Vec<Vec<String>> = (0..config.num_communities)
        .map(|_| (0..8).map(|_| word(&mut rng)).collect())
        .collect();
    let lasts: Vec<Vec<String>> = (0..config.num_communities)
        .map(|_| (0..5).map(|_| word(&mut rng)).collect())
        .collect();

    let planted = 3;
    let mut profiles: Vec<Profile> = Vec::with_capacity(config.num_docs);
    for _ in 0..config.num_docs - planted {
        let community = rng.random_range(0..config.num_communities);
        let first = firsts[community].choose(&mut rng).unwrap().clone();
        let last = if rng.random_bool(config.name_collision_rate) {
            shared_surnames.choose(&mut rng).unwrap().clone()
        } else {
            lasts[community].choose(&mut rng).unwrap().clone()
        };
        let city = if rng.random_bool(0.7) {
            (community % config.num_cities) as u32
        } else {
            rng.random_range(0..config.num_cities) as u32
        };
        let base = (community * 3) % config.num_groups;
        let mut groups = vec![base as u32, ((base + 1) % config.num_groups) as u32];
        if rng.random_bool(0.3) {
            groups.push(rng.random_range(0..config.num_groups) as u32);
        }
        groups.sort_unstable();
        groups.dedup();
        profiles.push(Profile { name: format!("{first} {last}"), city, groups });
    }

    // Planted fuzzy trio: the target and two decoys share a distinctive
    // second token, so only spelling and context tell them apart.
    let fuzzy_city = 0u32;
    profiles.push(Profile {
        name: "kasie creations".into(),
        city: fuzzy_city,
        groups: vec![0, 1],
    });
    profiles.push(Profile { name: "marlo creations".into(), city: 1, groups: vec![2] });
    profiles.push(Profile { name: "dovan creations".into(), city: 2, groups: vec![3] });
    let target_idx = profiles.len() - 3;
    let fuzzy_target_id = format!("p{target_idx:05}");
    let fuzzy_decoy_ids = vec![
        format!("p{:05}", target_idx + 1),
        format!("p{:05}", target_idx + 2),
    ];

    let corpus: Vec<Document> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| doc_for(&format!("p{i:05}"), p))
        .collect();

    // Misspelled first token that no document contains as a term.
    let all_tokens: BTreeSet<&str> =
        profiles.iter().flat_map(|p| p.name.split_whitespace()).collect();
    let mut query_first = None;
    for candidate in ["kacis", "kasei", "ksaie", "kaise", "kasiee"] {
        if !all_tokens.contains(candidate) {
            query_first = Some(candidate.to_string());
            break;
        }
    }
    let query_first = query_first.unwrap_or_else(|| "kaciszz".to_string());
    debug_assert!(!all_tokens.contains(query_first.as_str()));
    let fuzzy_text = format!("{query_first} creations");
    let term_query = format!(
        "(and {})",
        fuzzy_text
            .split_whitespace()
            .map(|t| format!("(term text:{t})"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    let fuzzy = FuzzyScenario {
        target_id: fuzzy_target_id,
        decoy_ids: fuzzy_decoy_ids,
        query: query_record(&fuzzy_text, fuzzy_city, &[0]),
        query_text: fuzzy_text,
        term_query,
    };

    // Confusable lookup: same surname token or same city.
    let mut by_surname: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut by_city: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, p) in profiles.iter().enumerate() {
        if let Some(last) = p.name.split_whitespace().nth(1) {
            by_surname.entry(last).or_default().push(i);
        }
        by_city.entry(p.city).or_default().push(i);
    }
    let confusables = |target: usize, k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let p = &profiles[target];
        let mut pool: Vec<usize> = Vec::new();
        if let Some(last) = p.name.split_whitespace().nth(1) {
            pool.extend(by_surname[last].iter().filter(|&&i| i != target));
        }
        pool.extend(by_city[&p.city].iter().filter(|&&i| i != target));
        pool.sort_unstable();
        pool.dedup();
        let mut picked: Vec<usize> = Vec::with_capacity(k);
        while picked.len() < k.min(pool.len()) {
            let i = *pool.choose(rng).unwrap();
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        while picked.len() < k {
            let i = rng.random_range(0..profiles.len());
            if i != target && !picked.contains(&i) {
                picked.push(i);
            }
        }
        picked
    };

    let searcher_context = |target: usize, rng: &mut ChaCha8Rng| -> (u32, Vec<u32>) {
        let p = &profiles[target];
        let city = if rng.random_bool(0.8) {
            p.city
        } else {
            rng.random_range(0..config.num_cities) as u32
        };
        let group = if rng.random_bool(0.5) {
            *p.groups.choose(rng).unwrap()
        } else {
            rng.random_range(0..config.num_groups) as u32
        };
        (city, vec![group])
    };

    let query_text_for = |target: usize, rng: &mut ChaCha8Rng| -> String {
        let name = &profiles[target].name;
        let tokens: Vec<&str> = name.split_whitespace().collect();
        let roll: f64 = rng.random();
        if roll < 0.60 {
            name.clone()
        } else if roll < 0.75 {
            tokens[0].to_string()
        } else if roll < 0.90 {
            tokens[tokens.len() - 1].to_string()
        } else {
            let mut out = tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>();
            out[0] = misspell(rng, &out[0]);
            out.join(" ")
        }
    };

    let train: Vec<TrainExample> = (0..config.train_pairs)
        .map(|_| {
            let target = rng.random_range(0..profiles.len());
            let text = query_text_for(target, &mut rng);
            let (city, groups) = searcher_context(target, &mut rng);
            let negatives = confusables(target, 2, &mut rng);
            TrainExample {
                query: query_record(&text, city, &groups),
                positive_id: format!("p{target:05}"),
                label_source: LabelSource::Click,
                non_click_impressions: negatives
                    .into_iter()
                    .map(|i| format!("p{i:05}"))
                    .collect(),
            }
        })
        .collect();

    let sessions: Vec<SessionRecord> = (0..config.num_sessions)
        .map(|_| {
            let target = rng.random_range(0..profiles.len());
            let text = query_text_for(target, &mut rng);
            let (city, groups) = searcher_context(target, &mut rng);
            let query = query_record(&text, city, &groups);
            if rng.random_bool(config.failure_rate) {
                // Failure: only confusables were shown, nothing clicked,
                // and the searcher later reached the target another way.
                let shown = confusables(target, rng.random_range(2..=3), &mut rng);
                SessionRecord {
                    query,
                    impressed: shown.into_iter().map(|i| format!("p{i:05}")).collect(),
                    clicked: vec![],
                    later_success: Some(format!("p{target:05}")),
                }
            } else {
                let mut shown: Vec<String> = confusables(target, rng.random_range(1..=2), &mut rng)
                    .into_iter()
                    .map(|i| format!("p{i:05}"))
                    .collect();
                let pos = rng.random_range(0..=shown.len());
                shown.insert(pos, format!("p{target:05}"));
                SessionRecord {
                    query,
                    impressed: shown,
                    clicked: vec![format!("p{target:05}")],
                    later_success: None,
                }
            }
        })
        .collect();

    let eval: Vec<EvalSession> = (0..config.eval_sessions)
        .map(|i| {
            let target = rng.random_range(0..profiles.len());
            let text = query_text_for(target, &mut rng);
            let (city, groups) = searcher_context(target, &mut rng);
            EvalSession {
                session_id: format!("e{i:04}"),
                query: query_record(&text, city, &groups),
                target_ids: BTreeSet::from([format!("p{target:05}")]),
            }
        })
        .collect();

    Ok(SynthData { corpus, train, sessions, eval, fuzzy })
}
