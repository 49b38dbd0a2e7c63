use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const REV: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[REV]", "[UNK]"];

/// Lowercases and splits on every character that is not alphanumeric.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whitespace/punctuation tokenizer over a corpus-built vocabulary.
///
/// Ids 0..5 are `[PAD] [CLS] [SEP] [REV] [UNK]`; words follow in sorted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Tokenizer {
    pub fn from_corpus<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(words(t));
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::from(vocab)
    }

    /// Restores a tokenizer from a stored vocabulary; the special tokens
    /// must occupy their fixed ids.
    pub fn from_vocab(vocab: Vec<String>) -> Option<Self> {
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return None;
        }
        Some(Self::from(vocab))
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.vocab.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// `[CLS] words… [SEP]`, truncated to `max_len` ids in total.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        self.encode_with(text, false, max_len)
    }

    /// As [`Tokenizer::encode`], with `[REV]` right after `[CLS]` when `reverse`.
    pub fn encode_with(&self, text: &str, reverse: bool, max_len: usize) -> Vec<usize> {
        let mut ids = vec![CLS];
        if reverse {
            ids.push(REV);
        }
        let budget = max_len.saturating_sub(ids.len() + 1);
        ids.extend(words(text).iter().take(budget).map(|w| self.id(w)));
        ids.push(SEP);
        ids
    }

    /// Words for the non-special ids, space-joined.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}
