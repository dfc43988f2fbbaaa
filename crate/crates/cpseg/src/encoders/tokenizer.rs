//! Word-level tokenizer over the closed prompt vocabulary.
//!
//! Sentences are lowercased, punctuation is stripped, and whitespace-split
//! words are mapped to ids. Four reserved ids precede the vocabulary proper;
//! word ids are assigned by (frequency desc, lexicographic) order so that
//! vocabulary construction is deterministic.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{CpSegError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const RESERVED: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Words in id order; index 0 corresponds to id `RESERVED`.
    words: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
    pub max_len: usize,
}

/// Lowercase, strip punctuation to spaces, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Build a tokenizer from a prompt corpus.
pub fn build_vocab(corpus: &[String], max_len: usize) -> Result<Tokenizer> {
    if corpus.is_empty() {
        return Err(CpSegError::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for sentence in corpus {
        for word in normalize(sentence) {
            *freq.entry(word).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(CpSegError::Config("corpus contains no words after normalization".into()));
    }
    let mut words: Vec<(String, usize)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words: Vec<String> = words.into_iter().map(|(w, _)| w).collect();
    Ok(Tokenizer::from_words(words, max_len))
}

impl Tokenizer {
    pub fn from_words(words: Vec<String>, max_len: usize) -> Self {
        let lookup = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), RESERVED + i))
            .collect();
        Tokenizer { words, lookup, max_len }
    }

    /// Rebuild the word lookup after deserialization.
    pub fn rebuild_lookup(&mut self) {
        self.lookup = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), RESERVED + i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED + self.words.len()
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.lookup.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Encode to exactly `max_len` ids: BOS, up to `max_len - 2` word ids,
    /// EOS, then PAD. Longer sentences are truncated.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        let words = normalize(sentence);
        if words.is_empty() {
            return Err(CpSegError::EmptyPrompt);
        }
        let keep = words.len().min(self.max_len - 2);
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(BOS_ID);
        for w in &words[..keep] {
            ids.push(self.word_id(w));
        }
        ids.push(EOS_ID);
        while ids.len() < self.max_len {
            ids.push(PAD_ID);
        }
        Ok(ids)
    }

    /// Position of the last non-PAD token (the EOS slot), used for pooling.
    pub fn end_position(ids: &[usize]) -> usize {
        ids.iter()
            .rposition(|&id| id != PAD_ID)
            .unwrap_or(ids.len() - 1)
    }

    /// Inverse of [`encode`] for in-vocabulary text, skipping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED)
            .map(|&id| self.words[id - RESERVED].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_words_plus_reserved() {
        let tok = build_vocab(&["is the road flooded".into()], 16).unwrap();
        assert_eq!(tok.vocab_size(), 4 + RESERVED);
    }

    #[test]
    fn duplicates_do_not_change_vocab() {
        let once = build_vocab(&["water near the road".into()], 16).unwrap();
        let twice = build_vocab(
            &["water near the road".into(), "water near the road".into()],
            16,
        )
        .unwrap();
        assert_eq!(once.vocab_size(), twice.vocab_size());
        assert_eq!(once.words, twice.words);
    }

    #[test]
    fn id_assignment_frequency_then_lexicographic() {
        let tok = build_vocab(&["b a".into(), "b c".into()], 16).unwrap();
        // b occurs twice, then a and c tie on frequency and sort by name.
        assert_eq!(tok.word_id("b"), RESERVED);
        assert_eq!(tok.word_id("a"), RESERVED + 1);
        assert_eq!(tok.word_id("c"), RESERVED + 2);
    }

    #[test]
    fn empty_corpus_is_config_error() {
        assert!(matches!(build_vocab(&[], 16), Err(CpSegError::Config(_))));
    }

    #[test]
    fn encode_round_trips_modulo_normalization() {
        let tok = build_vocab(&["Is the Road FLOODED?".into()], 16).unwrap();
        let ids = tok.encode("is the road flooded").unwrap();
        assert_eq!(ids.len(), 16);
        assert!(ids.iter().all(|&id| id < tok.vocab_size()));
        assert_eq!(tok.decode(&ids), "is the road flooded");
    }

    #[test]
    fn encode_truncates_long_sentences() {
        let tok = build_vocab(&["a b c d e f g h".into()], 6).unwrap();
        let ids_long = tok.encode("a b c d e f g h").unwrap();
        let ids_short = tok.encode("a b c d").unwrap();
        assert_eq!(ids_long, ids_short);
    }

    #[test]
    fn empty_prompt_is_an_error() {
        let tok = build_vocab(&["word".into()], 16).unwrap();
        assert!(matches!(tok.encode("  ?! ,"), Err(CpSegError::EmptyPrompt)));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = build_vocab(&["known".into()], 16).unwrap();
        let ids = tok.encode("mystery").unwrap();
        assert_eq!(ids[1], UNK_ID);
    }

    #[test]
    fn end_position_points_at_eos() {
        let tok = build_vocab(&["one two three".into()], 8).unwrap();
        let ids = tok.encode("one two").unwrap();
        assert_eq!(ids[Tokenizer::end_position(&ids)], EOS_ID);
    }
}
