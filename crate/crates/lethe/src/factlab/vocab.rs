//! Word-level vocabulary over the synthetic corpus.
//!
//! Every surface form in the corpus is a single made-up word and every word
//! is a single token, which keeps all answers single tokens by
//! construction. The vocabulary is rebuilt deterministically from corpus
//! content (sorted unique words plus the reserved empty-target word), so it
//! never needs to be serialized.

use crate::error::{Error, Result};
use crate::model::TokenId;
use std::collections::BTreeMap;

/// Reserved word the Empty Response defense retargets facts to. Never used
/// as a subject, filler, or answer.
pub const EMPTY_TARGET_WORD: &str = "dummy";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocab {
    /// Builds from an arbitrary word iterator; sorts, dedups, and inserts
    /// the reserved empty-target word.
    pub fn build<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut all: Vec<String> = words.into_iter().collect();
        all.push(EMPTY_TARGET_WORD.to_string());
        all.sort();
        all.dedup();
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Vocab { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index.get(word).copied().ok_or_else(|| {
            Error::CorpusGeneration(format!("word {word:?} not in vocabulary"))
        })
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    pub fn empty_target(&self) -> TokenId {
        self.index[EMPTY_TARGET_WORD]
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Vec<String> {
        tokens.iter().map(|&t| self.word(t).to_string()).collect()
    }
}
