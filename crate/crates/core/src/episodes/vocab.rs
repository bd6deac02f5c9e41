use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::model::{BOS, EOS, PAD};
use crate::rng;

pub const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Template words shared by every grammar.
pub const GRAMMAR_WORDS: [&str; 13] = [
    "this", "is", "a", "photo", "of", "what", "on", "the", "left", "right", "answer", "with", "or",
];

/// Vocabulary size needed for `categories` category names.
pub fn vocab_size_for(categories: usize) -> usize {
    SPECIALS.len() + GRAMMAR_WORDS.len() + categories
}

/// Word-level vocabulary: specials, then grammar words, then category names.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    /// Specials and grammar words plus `categories` seeded consonant-vowel-consonant names.
    pub fn synthetic(categories: usize, seed: u64) -> Self {
        const ONSET: &[u8] = b"bdfgklmnprstvz";
        const VOWEL: &[u8] = b"aeiou";
        let mut names: Vec<String> = Vec::new();
        for &a in ONSET {
            for &b in VOWEL {
                for &c in ONSET {
                    names.push(String::from_utf8(vec![a, b, c]).expect("ascii"));
                }
            }
        }
        let mut rng = rng::stream(seed, rng::STREAM_DATASET);
        names.shuffle(&mut rng);
        let mut words: Vec<String> = SPECIALS
            .iter()
            .chain(GRAMMAR_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        words.extend(names.into_iter().take(categories));
        debug_assert_eq!(words[PAD], "<pad>");
        debug_assert_eq!(words[BOS], "<bos>");
        debug_assert_eq!(words[EOS], "<eos>");
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of a grammar word; panics on words outside the fixed grammar.
    pub fn word(&self, word: &str) -> usize {
        self.id(word)
            .unwrap_or_else(|| panic!("`{word}` is not in the vocabulary"))
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.words.get(t).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode(&self, text: &str) -> Option<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}
