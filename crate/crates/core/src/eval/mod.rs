//! Automatic metrics, co-occurrence statistics and correlation-graph export.

mod export;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{tokenize, DialogueSample, EmotionWordLexicon, TokenizedInstance};
use crate::decoder::{ranking, Strategy};
use crate::model::Model;
use crate::nn::Ctx;
use crate::training::gen_loss;
use crate::{Error, Result};

pub use export::{co_occurrence_matrix, CorrelationExport, Edge};

/// `exp(nll / tokens)`.
pub fn perplexity(nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Invalid("perplexity over zero tokens".into()));
    }
    Ok((nll / tokens as f64).exp())
}

/// Corpus-level unique n-grams over total n-grams, in [0, 1].
pub fn distinct_n<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> f64 {
    assert!(n > 0, "n-gram order must be positive");
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for gram in r.windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        log::warn!("distinct-{n} over zero {n}-grams");
        return 0.0;
    }
    seen.len() as f64 / total as f64
}

/// Mean of per-response distinct-n ratios (responses shorter than `n` are skipped).
pub fn distinct_n_per_response<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> f64 {
    let ratios: Vec<f64> =
        responses.iter().filter(|r| r.len() >= n).map(|r| distinct_n(std::slice::from_ref(r), n)).collect();
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().sum::<f64>() / ratios.len() as f64
}

/// Percentage of matching predictions.
pub fn emotion_accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Invalid(format!("{} predictions for {} golds", predictions.len(), golds.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("accuracy over zero samples".into()));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / golds.len() as f64)
}

/// Mean number of gold emotions among the first `k` ids of each ranking.
pub fn recall_at_k(rankings: &[Vec<usize>], golds: &[BTreeSet<usize>], k: usize) -> Result<f64> {
    let sets: Vec<BTreeSet<usize>> = rankings.iter().map(|r| r.iter().take(k).copied().collect()).collect();
    hard_set_recall(&sets, golds)
}

/// Mean number of gold emotions inside each predicted set.
pub fn hard_set_recall(predicted: &[BTreeSet<usize>], golds: &[BTreeSet<usize>]) -> Result<f64> {
    if predicted.len() != golds.len() {
        return Err(Error::Invalid(format!("{} predictions for {} gold sets", predicted.len(), golds.len())));
    }
    if predicted.is_empty() {
        return Err(Error::Invalid("recall over zero samples".into()));
    }
    if golds.iter().any(BTreeSet::is_empty) {
        return Err(Error::Invalid("gold emotion sets must be nonempty".into()));
    }
    let covered: usize = predicted.iter().zip(golds).map(|(p, g)| p.intersection(g).count()).sum();
    Ok(covered as f64 / golds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ppl: f64,
    /// Percentages.
    pub dist1: f64,
    pub dist2: f64,
    pub acc: f64,
    pub recall_at: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard_set_recall: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrenceStats {
    pub samples: usize,
    /// `histogram[n]` = samples with exactly `n` secondary emotions.
    pub histogram: Vec<usize>,
    pub with_secondary: usize,
    /// Fraction of samples with at least one secondary emotion.
    pub proportion: f64,
}

/// Secondary emotion `e ≠ gold` is present when at least `min_words` of its
/// related words or phrases occur in the context.
pub fn co_occurrence_stats(samples: &[DialogueSample], lexicon: &EmotionWordLexicon, min_words: usize) -> CoOccurrenceStats {
    let p = lexicon.len();
    let mut histogram = vec![0; p];
    for s in samples {
        let tokens: Vec<String> = s.context.iter().flat_map(|u| tokenize(&u.text)).collect();
        let count = (0..p)
            .filter(|&e| e != s.emotion)
            .filter(|&e| {
                let hits = lexicon.words(e).iter().filter(|phrase| contains_phrase(&tokens, phrase)).count();
                hits >= min_words.max(1)
            })
            .count();
        histogram[count] += 1;
    }
    let with_secondary = samples.len() - histogram.first().copied().unwrap_or(0);
    let proportion = if samples.is_empty() { 0.0 } else { with_secondary as f64 / samples.len() as f64 };
    CoOccurrenceStats { samples: samples.len(), histogram, with_secondary, proportion }
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Model outputs for one instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceEval {
    /// Teacher-forced unsmoothed NLL and token count.
    pub nll: f64,
    pub tokens: usize,
    pub predicted: usize,
    pub gold: usize,
    /// Emotion ids by descending `h_emo`.
    pub ranking: Vec<usize>,
    /// Relevant set (hard) or top-3 (soft).
    pub relevant: BTreeSet<usize>,
    pub gold_emotions: Option<BTreeSet<usize>>,
    pub generated: Vec<usize>,
}

pub fn evaluate_instance(
    model: &Model,
    inst: &TokenizedInstance,
    strategy: Strategy,
    max_len: usize,
) -> Result<InstanceEval> {
    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let mut ctx = Ctx::eval(&mut tape, &bindings);
    let fwd = model.forward(&mut ctx, inst, strategy)?;
    let g = gen_loss(ctx.tape, fwd.logits, &inst.response[1..], 0.0)?;
    let outcome = &fwd.perceived.plan.outcome;
    let generation = model.generate(inst, strategy, max_len)?;
    Ok(InstanceEval {
        nll: g.nll,
        tokens: g.tokens,
        predicted: fwd.perceived.perception.predicted,
        gold: inst.emotion,
        ranking: ranking(&outcome.h_emo),
        relevant: outcome.selected.clone(),
        gold_emotions: inst.gold_emotions.clone(),
        generated: generation.tokens,
    })
}

/// Aggregates per-instance results. Recall is reported only when every
/// instance carries a gold emotion set.
pub fn summarize(records: &[InstanceEval], strategy: Strategy, ks: &[usize]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Invalid("no evaluation records".into()));
    }
    let nll: f64 = records.iter().map(|r| r.nll).sum();
    let tokens: usize = records.iter().map(|r| r.tokens).sum();
    let generated: Vec<Vec<usize>> = records.iter().map(|r| r.generated.clone()).collect();
    let preds: Vec<usize> = records.iter().map(|r| r.predicted).collect();
    let golds: Vec<usize> = records.iter().map(|r| r.gold).collect();
    let gold_sets: Option<Vec<BTreeSet<usize>>> = records.iter().map(|r| r.gold_emotions.clone()).collect();
    let mut recall_at = BTreeMap::new();
    let mut hard = None;
    if let Some(sets) = &gold_sets {
        let rankings: Vec<Vec<usize>> = records.iter().map(|r| r.ranking.clone()).collect();
        for &k in ks {
            recall_at.insert(k, recall_at_k(&rankings, sets, k)?);
        }
        if strategy == Strategy::Hard {
            let rel: Vec<BTreeSet<usize>> = records.iter().map(|r| r.relevant.clone()).collect();
            hard = Some(hard_set_recall(&rel, sets)?);
        }
    }
    Ok(MetricsReport {
        ppl: perplexity(nll, tokens)?,
        dist1: 100.0 * distinct_n(&generated, 1),
        dist2: 100.0 * distinct_n(&generated, 2),
        acc: emotion_accuracy(&preds, &golds)?,
        recall_at,
        hard_set_recall: hard,
        samples: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0, 5).unwrap(), 1.0);
        assert!((perplexity(10.0 * 50f64.ln(), 10).unwrap() - 50.0).abs() < 1e-9);
        assert!(perplexity(1.0, 0).is_err());
    }

    #[test]
    fn distinct_examples() {
        let r = vec![vec!["a", "b"], vec!["a", "b"]];
        assert_eq!(distinct_n(&r, 1), 0.5);
        assert_eq!(distinct_n(&r, 2), 0.5);
        assert_eq!(distinct_n(&[vec!["x", "y", "z"]], 1), 1.0);
        assert_eq!(distinct_n(&[vec!["x"]], 2), 0.0);
        assert_eq!(distinct_n_per_response(&r, 1), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(emotion_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(emotion_accuracy(&[1, 0], &[1, 2]).unwrap(), 50.0);
        assert!(emotion_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn recall_examples() {
        let r = recall_at_k(&[vec![0, 2, 3, 1]], &[set(&[0, 1])], 3).unwrap();
        assert_eq!(r, 1.0);
        let r = recall_at_k(&[vec![1, 0, 2]], &[set(&[0, 1])], 3).unwrap();
        assert_eq!(r, 2.0);
        assert!(hard_set_recall(&[set(&[1])], &[set(&[])]).is_err());
    }
}
