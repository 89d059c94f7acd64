use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const CLS: &str = "[CLS]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const CLS_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const PAD_ID: usize = 3;
pub const UNK_ID: usize = 4;

const RESERVED: [&str; 5] = [CLS, BOS, EOS, PAD, UNK];

/// Lowercases `text` and splits it into alphanumeric runs; every other
/// non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Token ↔ id bijection with the five reserved tokens at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

impl Vocabulary {
    /// Tokens seen at least `min_count` times, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let min_count = min_count.max(1);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::default();
        for (tok, _) in kept {
            vocab.insert(&tok);
        }
        vocab
    }

    /// Appends `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins ids with spaces, skipping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= UNK_ID)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation() {
        assert_eq!(tokenize("I am sad"), ["i", "am", "sad"]);
        assert_eq!(tokenize("Wow, I'm  SO happy!"), ["wow", ",", "i", "'", "m", "so", "happy", "!"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::default();
        assert_eq!(v.len(), 5);
        assert_eq!([v.id(CLS), v.id(BOS), v.id(EOS), v.id(PAD), v.id(UNK)], [0, 1, 2, 3, 4]);
    }

    #[test]
    fn min_count_threshold() {
        let v = Vocabulary::build(["a a b"], 2);
        assert!(v.get("a").is_some());
        assert!(v.get("b").is_none());
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn empty_corpus_keeps_reserved_only() {
        let v = Vocabulary::build(std::iter::empty(), 1);
        assert_eq!(v, Vocabulary::default());
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::build(["zeta beta alpha beta"], 1);
        assert_eq!(&v.tokens()[5..], ["beta", "alpha", "zeta"]);
        assert_eq!(v, Vocabulary::build(["zeta beta alpha beta"], 1));
    }

    #[test]
    fn decode_skips_markers() {
        let mut v = Vocabulary::default();
        let hi = v.insert("hi");
        assert_eq!(v.decode(&[BOS_ID, hi, UNK_ID, EOS_ID]), "hi [UNK]");
    }
}
