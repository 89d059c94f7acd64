//! JSON-returning wrappers for the browser demo. Each exported function has a
//! plain Rust counterpart so the logic is testable without a JS host.

use std::collections::BTreeSet;

use ecore::corpus::{intensity, synth_corpus, tokenize, SentimentLexicon, SynthConfig, Taxonomy};
use ecore::decoder::{otsu_split, MAX_RELEVANT};
use ecore::eval::CorrelationExport;
use ecore::graph::{GraphConfig, GraphTopology};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct OtsuResult {
    pub relevant: BTreeSet<usize>,
    pub irrelevant: BTreeSet<usize>,
    pub variance: f64,
}

pub fn otsu(values: &[f64]) -> Result<OtsuResult, String> {
    let s = otsu_split(values, MAX_RELEVANT).map_err(|e| e.to_string())?;
    Ok(OtsuResult { relevant: s.relevant, irrelevant: s.irrelevant, variance: s.variance })
}

#[derive(Debug, Serialize)]
pub struct ResolutionView {
    pub threshold: f64,
    pub active_words: Vec<usize>,
    /// Directed `(from, to)` pairs: node `from` attends to node `to`.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize)]
pub struct TopologyView {
    /// `[CLS]`, the words, then the emotion names.
    pub nodes: Vec<String>,
    pub words: usize,
    pub intensity: Vec<f64>,
    pub resolutions: Vec<ResolutionView>,
}

/// Multi-resolution graph of `sentence` under the bundled sentiment lexicon.
pub fn topology(sentence: &str, thresholds: &[f64], emotions: usize) -> Result<TopologyView, String> {
    let words = tokenize(sentence);
    let c = intensity(&words, &SentimentLexicon::bundled());
    let taxonomy = Taxonomy::first(emotions);
    let cfg = GraphConfig { thresholds: thresholds.to_vec(), layers: 1, emotions, d_model: thresholds.len().max(1) };
    cfg.validate().map_err(|e| e.to_string())?;
    let topo = GraphTopology::build(&c, &cfg);
    let n = topo.nodes();
    let mut nodes = vec!["[CLS]".to_string()];
    nodes.extend(words);
    nodes.extend(taxonomy.names().iter().cloned());
    let resolutions = topo
        .resolutions()
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let adj = topo.adjacency(k);
            let edges = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| adj[i * n + j]).collect();
            ResolutionView { threshold: r.threshold, active_words: topo.active_words(k).into_iter().collect(), edges }
        })
        .collect();
    Ok(TopologyView { nodes, words: topo.words(), intensity: c, resolutions })
}

#[derive(Debug, Serialize)]
pub struct CorrelationView {
    pub export: CorrelationExport,
    pub dot: String,
}

/// Co-occurrence graph of a freshly generated planted-pair corpus.
pub fn correlation(
    emotions: usize,
    samples: usize,
    pairs: &[(usize, usize)],
    co_prob: f64,
    threshold: f64,
    seed: u64,
) -> Result<CorrelationView, String> {
    let cfg = SynthConfig { emotions, samples, planted_pairs: pairs.to_vec(), co_prob, ..SynthConfig::default() };
    let corpus = synth_corpus(&cfg, seed).map_err(|e| e.to_string())?;
    let export = CorrelationExport::from_dataset(&corpus.samples, corpus.taxonomy.names(), threshold)
        .map_err(|e| e.to_string())?;
    let dot = export.to_dot();
    Ok(CorrelationView { export, dot })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = otsuSplit)]
pub fn otsu_split_js(values: &[f64]) -> Result<String, JsError> {
    to_json(otsu(values))
}

#[wasm_bindgen(js_name = sentenceTopology)]
pub fn topology_js(sentence: &str, thresholds: &[f64], emotions: usize) -> Result<String, JsError> {
    to_json(topology(sentence, thresholds, emotions))
}

/// `pairs` is a flat list `[a0, b0, a1, b1, ...]`.
#[wasm_bindgen(js_name = exportCorrelation)]
pub fn correlation_js(
    emotions: usize,
    samples: usize,
    pairs: &[u32],
    co_prob: f64,
    threshold: f64,
    seed: u32,
) -> Result<String, JsError> {
    if !pairs.len().is_multiple_of(2) {
        return Err(JsError::new("pairs must have an even number of entries"));
    }
    let pairs: Vec<(usize, usize)> = pairs.chunks(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
    to_json(correlation(emotions, samples, &pairs, co_prob, threshold, seed as u64))
}
