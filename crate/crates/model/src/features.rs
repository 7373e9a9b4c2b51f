//! Text-to-categorical feature extraction: boundary-marked character
//! trigrams over an enumerated alphabet, plus word unigrams and bigrams
//! hashed into a fixed id space. Weights are term frequencies.

use embr_core::fnv1a64;
use std::collections::BTreeMap;

/// Channel name for character trigram features.
pub const CHAR_TRIGRAMS_CHANNEL: &str = "char_trigrams";
/// Channel name for hashed word n-gram features.
pub const WORD_NGRAMS_CHANNEL: &str = "word_ngrams";

/// Alphabet: a-z (0-25), 0-9 (26-35), space (36), the boundary marker '#'
/// (37), and a catch-all for everything else (38).
const ALPHABET_SIZE: u32 = 39;
const SYM_SPACE: u32 = 36;
const SYM_BOUNDARY: u32 = 37;
const SYM_OTHER: u32 = 38;

/// Trigram ids live in [0, 39^3).
pub const TRIGRAM_VOCAB_SIZE: usize = (ALPHABET_SIZE * ALPHABET_SIZE * ALPHABET_SIZE) as usize;

/// Word n-gram ids are a 64-bit FNV-1a hash reduced mod 2^18.
pub const WORD_HASH_SPACE: usize = 1 << 18;

fn symbol(c: char) -> u32 {
    match c {
        'a'..='z' => c as u32 - 'a' as u32,
        '0'..='9' => 26 + (c as u32 - '0' as u32),
        ' ' => SYM_SPACE,
        '#' => SYM_BOUNDARY,
        _ => SYM_OTHER,
    }
}

/// Extracts both text channels from one string. Lowercases first; char
/// trigrams run over the text wrapped in '#' boundary markers; word
/// unigrams and bigrams are FNV-1a-hashed into [0, 2^18). Empty text
/// yields empty feature lists. Deterministic: no per-process state.
pub fn extract_text_features(text: &str) -> BTreeMap<String, Vec<(u32, f64)>> {
    let lower = text.to_lowercase();

    let mut trigram_counts: BTreeMap<u32, f64> = BTreeMap::new();
    let symbols: Vec<u32> = std::iter::once(SYM_BOUNDARY)
        .chain(lower.chars().map(symbol))
        .chain(std::iter::once(SYM_BOUNDARY))
        .collect();
    // "##" from empty text has no window of 3; that is the empty case.
    for window in symbols.windows(3) {
        let id = (window[0] * ALPHABET_SIZE + window[1]) * ALPHABET_SIZE + window[2];
        *trigram_counts.entry(id).or_insert(0.0) += 1.0;
    }

    let mut word_counts: BTreeMap<u32, f64> = BTreeMap::new();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    for token in &tokens {
        let id = (fnv1a64(token.as_bytes()) % WORD_HASH_SPACE as u64) as u32;
        *word_counts.entry(id).or_insert(0.0) += 1.0;
    }
    for pair in tokens.windows(2) {
        let bigram = format!("{} {}", pair[0], pair[1]);
        let id = (fnv1a64(bigram.as_bytes()) % WORD_HASH_SPACE as u64) as u32;
        *word_counts.entry(id).or_insert(0.0) += 1.0;
    }

    let mut channels = BTreeMap::new();
    channels.insert(
        CHAR_TRIGRAMS_CHANNEL.to_string(),
        trigram_counts.into_iter().collect(),
    );
    channels.insert(
        WORD_NGRAMS_CHANNEL.to_string(),
        word_counts.into_iter().collect(),
    );
    channels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trigram_ids(text: &str) -> Vec<u32> {
        extract_text_features(text)[CHAR_TRIGRAMS_CHANNEL]
            .iter()
            .map(|&(id, _)| id)
            .collect()
    }

    #[test]
    fn cat_yields_exactly_its_three_boundary_trigrams() {
        // Hand-computed: '#'=37, c=2, a=0, t=19.
        // "#ca" = (37*39 + 2)*39 + 0 = 56355
        // "cat" = (2*39 + 0)*39 + 19 = 3061
        // "at#" = (0*39 + 19)*39 + 37 = 778
        let feats = &extract_text_features("cat")[CHAR_TRIGRAMS_CHANNEL];
        assert_eq!(feats, &vec![(778, 1.0), (3061, 1.0), (56355, 1.0)]);
    }

    #[test]
    fn near_duplicate_names_share_many_trigrams() {
        let a: std::collections::BTreeSet<u32> = trigram_ids("kacis creations").into_iter().collect();
        let b: std::collections::BTreeSet<u32> = trigram_ids("kasie's creations").into_iter().collect();
        let shared = a.intersection(&b).count();
        assert!(shared >= 5, "only {shared} shared trigrams");
    }

    #[test]
    fn weights_count_term_frequency() {
        let feats = extract_text_features("the the the");
        let words = &feats[WORD_NGRAMS_CHANNEL];
        // One unigram id with weight 3, one bigram id with weight 2.
        let mut weights: Vec<f64> = words.iter().map(|&(_, w)| w).collect();
        weights.sort_by(f64::total_cmp);
        assert_eq!(weights, vec![2.0, 3.0]);
        // The repeated trigram "e t" appears twice.
        let tris = &feats[CHAR_TRIGRAMS_CHANNEL];
        assert!(tris.iter().any(|&(_, w)| w == 2.0));
    }

    #[test]
    fn empty_text_yields_empty_feature_lists() {
        let feats = extract_text_features("");
        assert!(feats[CHAR_TRIGRAMS_CHANNEL].is_empty());
        assert!(feats[WORD_NGRAMS_CHANNEL].is_empty());
    }

    #[test]
    fn extraction_is_case_insensitive_and_deterministic() {
        assert_eq!(extract_text_features("CAT Dog"), extract_text_features("cat dog"));
        assert_eq!(extract_text_features("cat dog"), extract_text_features("cat dog"));
    }

    #[test]
    fn ids_stay_inside_their_vocabularies() {
        let feats = extract_text_features("zebra 99 bottles of müsli #tagged");
        for &(id, _) in &feats[CHAR_TRIGRAMS_CHANNEL] {
            assert!((id as usize) < TRIGRAM_VOCAB_SIZE);
        }
        for &(id, _) in &feats[WORD_NGRAMS_CHANNEL] {
            assert!((id as usize) < WORD_HASH_SPACE);
        }
    }
}
