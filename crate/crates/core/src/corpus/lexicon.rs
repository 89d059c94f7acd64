use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::tokenize;
use crate::error::{Error, Result};

/// The 32 emotion names, in the order of the bundled emotion-word table.
pub const DEFAULT_EMOTIONS: [&str; 32] = [
    "surprised", "excited", "annoyed", "proud", "angry", "sad", "grateful", "lonely",
    "impressed", "afraid", "disgusted", "confident", "terrified", "hopeful", "anxious",
    "disappointed", "joyful", "prepared", "guilty", "furious", "nostalgic", "jealous",
    "anticipating", "embarrassed", "content", "devastated", "sentimental", "caring",
    "trusting", "ashamed", "apprehensive", "faithful",
];

const DEFAULT_EMOTION_WORDS: &str = include_str!("../../data/emotion_words.tsv");
const DEFAULT_SENTIMENT: &str = include_str!("../../data/sentiment.tsv");

/// Ordered emotion names; an emotion's id is its position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    names: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::new(DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect())
    }
}

impl Taxonomy {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    /// The first `p` default names, or `emotion{i}` beyond 32.
    pub fn first(p: usize) -> Self {
        Self::new(
            (0..p)
                .map(|i| DEFAULT_EMOTIONS.get(i).map_or_else(|| format!("emotion{i}"), |s| s.to_string()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        let name = name.trim().to_lowercase();
        self.names.iter().position(|n| *n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Word → positivity score η ∈ [0, 1]; unknown words score 0.5.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentimentLexicon {
    scores: HashMap<String, f64>,
}

impl SentimentLexicon {
    pub const NEUTRAL: f64 = 0.5;

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_SENTIMENT, Path::new("<bundled sentiment.tsv>")).expect("bundled lexicon parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lex = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse { path: origin.to_path_buf(), line: n + 1, message };
            let (word, eta) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected word<TAB>eta".into()))?;
            let eta: f64 = eta.trim().parse().map_err(|_| parse_err(format!("bad score {eta:?}")))?;
            lex.insert(word.trim(), eta).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn insert(&mut self, word: &str, eta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Invalid(format!("score {eta} for {word:?} outside [0, 1]")));
        }
        self.scores.insert(word.to_lowercase(), eta);
        Ok(())
    }

    pub fn eta(&self, word: &str) -> f64 {
        self.scores.get(word).copied().unwrap_or(Self::NEUTRAL)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Entries sorted by word, for stable serialization.
    pub fn entries(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<_> = self.scores.iter().map(|(w, &e)| (w.as_str(), e)).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }
}

/// Emotion intensity `(η − 0.5)²` for each word.
pub fn intensity<S: AsRef<str>>(words: &[S], lexicon: &SentimentLexicon) -> Vec<f64> {
    words
        .iter()
        .map(|w| {
            let d = lexicon.eta(w.as_ref()) - SentimentLexicon::NEUTRAL;
            d * d
        })
        .collect()
}

/// Emotion id → related surface forms, each pre-tokenized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionWordLexicon {
    words: Vec<Vec<Vec<String>>>,
}

impl EmotionWordLexicon {
    pub fn bundled(taxonomy: &Taxonomy) -> Result<Self> {
        Self::parse(DEFAULT_EMOTION_WORDS, Path::new("<bundled emotion_words.tsv>"), taxonomy)
    }

    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, taxonomy)
    }

    /// Parses `emotion<TAB>word1,word2,...`. Rows for emotions outside the
    /// taxonomy are skipped; every taxonomy emotion must have a row.
    pub fn parse(text: &str, origin: &Path, taxonomy: &Taxonomy) -> Result<Self> {
        let mut words = vec![Vec::new(); taxonomy.len()];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (emotion, list) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message: "expected emotion<TAB>word,...".into(),
            })?;
            let Some(id) = taxonomy.id(emotion) else { continue };
            for w in list.split(',') {
                let toks = tokenize(w);
                if !toks.is_empty() && !words[id].contains(&toks) {
                    words[id].push(toks);
                }
            }
        }
        Self::from_words(words, taxonomy)
    }

    pub fn from_words(words: Vec<Vec<Vec<String>>>, taxonomy: &Taxonomy) -> Result<Self> {
        if let Some(missing) = words.iter().position(Vec::is_empty) {
            return Err(Error::Invalid(format!("no related words for emotion {:?}", taxonomy.name(missing))));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self, emotion: usize) -> &[Vec<String>] {
        &self.words[emotion]
    }

    /// Whether any related phrase of `emotion` occurs as a contiguous run in `tokens`.
    pub fn occurs_in(&self, emotion: usize, tokens: &[String]) -> bool {
        self.words[emotion]
            .iter()
            .any(|phrase| tokens.windows(phrase.len()).any(|w| w == phrase.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_formula() {
        let mut lex = SentimentLexicon::default();
        lex.insert("meh", 0.5).unwrap();
        lex.insert("great", 1.0).unwrap();
        lex.insert("good", 0.8).unwrap();
        let c = intensity(&["meh", "great", "good", "unseen"], &lex);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[1], 0.25);
        assert!((c[2] - 0.09).abs() < 1e-12);
        assert_eq!(c[3], 0.0);
    }

    #[test]
    fn rejects_out_of_range_scores() {
        let err = SentimentLexicon::parse("bad\t1.5\n", Path::new("x.tsv")).unwrap_err();
        assert!(err.to_string().contains("x.tsv:1"));
    }

    #[test]
    fn bundled_lexicons_cover_taxonomy() {
        let tax = Taxonomy::default();
        let lex = EmotionWordLexicon::bundled(&tax).unwrap();
        assert_eq!(lex.len(), 32);
        let afraid = tax.id("afraid").unwrap();
        assert!(lex.occurs_in(afraid, &tokenize("I was so scared last night")));
        let disgusted = tax.id("disgusted").unwrap();
        assert!(lex.occurs_in(disgusted, &tokenize("I am sick of this")));
        assert!(SentimentLexicon::bundled().len() >= 200);
    }

    #[test]
    fn taxonomy_lookup_is_case_insensitive() {
        let tax = Taxonomy::default();
        assert_eq!(tax.id("Afraid"), Some(9));
        assert_eq!(tax.id("bored"), None);
        assert_eq!(Taxonomy::first(3).names(), ["surprised", "excited", "annoyed"]);
    }
}
