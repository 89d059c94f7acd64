use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{EmotionWordLexicon, SentimentLexicon, Taxonomy};
use super::{DialogueSample, Speaker, Utterance};
use crate::error::{Error, Result};

const FILLER: [&str; 12] = ["the", "a", "and", "was", "it", "day", "today", "went", "had", "with", "for", "we"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub emotions: usize,
    pub samples: usize,
    /// Unordered emotion pairs that co-occur; an emotion belongs to at most one pair.
    pub planted_pairs: Vec<(usize, usize)>,
    pub co_prob: f64,
    pub vocab_per_emotion: usize,
    /// Fraction of context tokens that are neutral filler, in [0, 1).
    pub filler_rate: f64,
    pub main_keywords: usize,
    pub secondary_keywords: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            emotions: 8,
            samples: 512,
            planted_pairs: vec![(0, 1), (2, 3)],
            co_prob: 0.8,
            vocab_per_emotion: 4,
            filler_rate: 0.4,
            main_keywords: 3,
            secondary_keywords: 2,
        }
    }
}

/// Generated samples with the structure they were generated from.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub samples: Vec<DialogueSample>,
    /// Planted pairs normalized to `(low, high)`.
    pub planted: BTreeSet<(usize, usize)>,
    pub taxonomy: Taxonomy,
    /// Scores for every synthetic keyword (filler stays neutral).
    pub sentiment: SentimentLexicon,
    pub emotion_words: EmotionWordLexicon,
}

/// Keyword `j` of emotion `e`.
fn keyword(taxonomy: &Taxonomy, e: usize, j: usize) -> String {
    format!("{}{j}", taxonomy.name(e))
}

pub fn synth_corpus(config: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    let p = config.emotions;
    if p < 2 {
        return Err(Error::Config(format!("synthetic corpus needs at least 2 emotions, got {p}")));
    }
    if !(0.0..=1.0).contains(&config.co_prob) || !(0.0..1.0).contains(&config.filler_rate) {
        return Err(Error::Config("co_prob must be in [0, 1] and filler_rate in [0, 1)".into()));
    }
    if config.vocab_per_emotion == 0 || config.main_keywords == 0 {
        return Err(Error::Config("vocab_per_emotion and main_keywords must be positive".into()));
    }
    let mut partner = vec![None; p];
    let mut planted = BTreeSet::new();
    for &(a, b) in &config.planted_pairs {
        if a >= p || b >= p || a == b {
            return Err(Error::Config(format!("planted pair ({a}, {b}) invalid for {p} emotions")));
        }
        if partner[a].is_some() || partner[b].is_some() {
            return Err(Error::Config(format!("emotion in pair ({a}, {b}) already paired")));
        }
        partner[a] = Some(b);
        partner[b] = Some(a);
        planted.insert((a.min(b), a.max(b)));
    }

    let taxonomy = Taxonomy::first(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentiment = SentimentLexicon::default();
    let mut words = Vec::with_capacity(p);
    for e in 0..p {
        // Alternate valence so intensities are high either way.
        let positive = e % 2 == 0;
        let mut list = Vec::new();
        for j in 0..config.vocab_per_emotion {
            let kw = keyword(&taxonomy, e, j);
            let eta = if positive { rng.gen_range(0.85..=1.0) } else { rng.gen_range(0.0..=0.15) };
            sentiment.insert(&kw, eta)?;
            list.push(vec![kw]);
        }
        words.push(list);
    }
    let emotion_words = EmotionWordLexicon::from_words(words, &taxonomy)?;

    let mut samples = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let main = rng.gen_range(0..p);
        let secondary = match partner[main] {
            Some(other) if rng.gen::<f64>() < config.co_prob => Some(other),
            _ => None,
        };
        let mut toks: Vec<String> = (0..config.main_keywords)
            .map(|_| keyword(&taxonomy, main, rng.gen_range(0..config.vocab_per_emotion)))
            .collect();
        let reply_kw = toks[0].clone();
        if let Some(sec) = secondary {
            toks.extend(
                (0..config.secondary_keywords)
                    .map(|_| keyword(&taxonomy, sec, rng.gen_range(0..config.vocab_per_emotion))),
            );
        }
        let n_fill = (toks.len() as f64 * config.filler_rate / (1.0 - config.filler_rate)).round() as usize;
        toks.extend((0..n_fill).map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string()));
        toks.shuffle(&mut rng);
        let context = if toks.len() >= 2 && rng.gen_bool(0.5) {
            let cut = toks.len() / 2;
            vec![
                Utterance { speaker: Speaker::Speaker, text: toks[..cut].join(" ") },
                Utterance { speaker: Speaker::Listener, text: toks[cut..].join(" ") },
            ]
        } else {
            vec![Utterance { speaker: Speaker::Speaker, text: toks.join(" ") }]
        };
        let mut gold: BTreeSet<usize> = [main].into_iter().collect();
        gold.extend(secondary);
        samples.push(DialogueSample {
            context,
            response: format!("that sounds {reply_kw}"),
            emotion: main,
            gold_emotions: Some(gold),
        });
    }
    Ok(SyntheticCorpus { samples, planted, taxonomy, sentiment, emotion_words })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_co_prob_gives_singletons() {
        let cfg = SynthConfig { co_prob: 0.0, samples: 200, ..SynthConfig::default() };
        let c = synth_corpus(&cfg, 1).unwrap();
        assert!(c.samples.iter().all(|s| s.gold_emotions.as_ref().unwrap().len() == 1));
    }

    #[test]
    fn full_co_prob_always_adds_partner() {
        let cfg = SynthConfig { co_prob: 1.0, planted_pairs: vec![(3, 7)], samples: 300, ..SynthConfig::default() };
        let c = synth_corpus(&cfg, 2).unwrap();
        let with3: Vec<_> = c.samples.iter().filter(|s| s.emotion == 3).collect();
        assert!(!with3.is_empty());
        assert!(with3.iter().all(|s| s.gold_emotions.as_ref().unwrap().contains(&7)));
    }

    #[test]
    fn reproducible_for_a_seed() {
        let cfg = SynthConfig::default();
        let a = synth_corpus(&cfg, 9).unwrap();
        let b = synth_corpus(&cfg, 9).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.sentiment, b.sentiment);
        assert_ne!(a.samples, synth_corpus(&cfg, 10).unwrap().samples);
    }

    #[test]
    fn rejects_bad_pairs() {
        let cfg = SynthConfig { planted_pairs: vec![(0, 9)], ..SynthConfig::default() };
        assert!(synth_corpus(&cfg, 0).is_err());
        let cfg = SynthConfig { planted_pairs: vec![(0, 1), (1, 2)], ..SynthConfig::default() };
        assert!(synth_corpus(&cfg, 0).is_err());
    }

    #[test]
    fn response_carries_main_keyword() {
        let c = synth_corpus(&SynthConfig { samples: 50, ..SynthConfig::default() }, 4).unwrap();
        for s in &c.samples {
            let kw = s.response.rsplit(' ').next().unwrap();
            assert!(kw.starts_with(c.taxonomy.name(s.emotion)));
        }
    }
}
