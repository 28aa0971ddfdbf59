//! Word-level tokenizer over the small shared vocabulary used by every
//! model in an experiment suite.

use std::collections::HashMap;

use thiserror::Error;

use crate::rng::fnv1a64;

pub type TokenId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("unknown token '{0}'")]
    UnknownToken(String),
}

/// The canonical vocabulary: specials first, then function words, colors,
/// shapes, and number words. Order is part of every trained artifact.
pub const VOCAB: &[&str] = &[
    "<pad>", "<bos>", "<eos>", "a", "an", "and", "are", "how", "image", "in", "is", "it", "many",
    "no", "object", "objects", "of", "photo", "the", "there", "this", "yes", "red", "green",
    "blue", "yellow", "cyan", "magenta", "white", "gray", "circle", "square", "triangle", "cross",
    "one", "two", "three", "four", "five",
];

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

/// Maps whitespace-separated lowercase words to token ids and back.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        Self::with_words(VOCAB.iter().map(|w| w.to_string()).collect())
    }

    /// A tokenizer over an explicit word list; words must be unique.
    pub fn with_words(words: Vec<String>) -> Self {
        assert!(words.len() <= 64, "vocabulary limited to 64 tokens, got {}", words.len());
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            let prev = index.insert(w.clone(), i);
            assert!(prev.is_none(), "duplicate vocabulary word '{w}'");
        }
        Tokenizer { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Stable hash of the word list, embedded in model manifests so a suite
    /// can verify all its models share one vocabulary.
    pub fn vocab_hash(&self) -> u64 {
        fnv1a64(self.words.join("\u{1f}").as_bytes())
    }

    fn normalize(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
    }

    pub fn tokenize(&self, s: &str) -> Result<Vec<TokenId>, TokenizerError> {
        Self::normalize(s)
            .split_whitespace()
            .map(|w| self.index.get(w).copied().ok_or_else(|| TokenizerError::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| {
                assert!(id < self.words.len(), "token id {} out of vocabulary", id);
                self.words[id].as_str()
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id]
    }

    pub fn id(&self, word: &str) -> Result<TokenId, TokenizerError> {
        self.index.get(word).copied().ok_or_else(|| TokenizerError::UnknownToken(word.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocabulary_is_small_enough() {
        let t = Tokenizer::new();
        assert!(t.vocab_size() <= 64);
        assert_eq!(t.vocab_size(), VOCAB.len());
    }

    #[test]
    fn unknown_word_is_an_error() {
        let t = Tokenizer::new();
        assert_eq!(
            t.tokenize("this is a zebra"),
            Err(TokenizerError::UnknownToken("zebra".to_string()))
        );
    }

    #[test]
    fn round_trip_fixed_phrases() {
        let t = Tokenizer::new();
        for s in ["this is a photo of a circle", "there are three objects", "yes", "no"] {
            assert_eq!(t.detokenize(&t.tokenize(s).unwrap()), s);
        }
    }

    proptest! {
        /// detokenize(tokenize(s)) == normalized s for any in-vocabulary text.
        #[test]
        fn round_trip_any_vocab_sentence(idxs in proptest::collection::vec(0usize..VOCAB.len(), 1..12)) {
            let t = Tokenizer::new();
            let sentence = idxs.iter().map(|&i| VOCAB[i]).collect::<Vec<_>>().join(" ");
            let toks = t.tokenize(&sentence).unwrap();
            prop_assert_eq!(t.detokenize(&toks), sentence);
        }
    }
}
