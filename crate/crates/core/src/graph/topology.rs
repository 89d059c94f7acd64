use std::collections::BTreeSet;

use super::GraphConfig;

/// One resolution of the multi-resolution emotion graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolution {
    pub threshold: f64,
    /// Word nodes present, `[CLS]` at index 0 always included.
    pub active_words: Vec<bool>,
    pub active_emotions: Vec<bool>,
    /// Row-major `[N × N]`; entry `(i, j)` means node `i` attends to node `j`.
    adjacency: Vec<bool>,
}

impl Resolution {
    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }
}

/// Node layout: word nodes `0..M` (`[CLS]` first), then emotion nodes `M..M+P`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    words: usize,
    emotions: usize,
    resolutions: Vec<Resolution>,
}

impl GraphTopology {
    /// Builds the graph for context intensities `intensity` (one per
    /// non-`[CLS]` word). `[CLS]` counts as having intensity `max(c)`.
    pub fn build(intensity: &[f64], config: &GraphConfig) -> Self {
        let words = intensity.len() + 1;
        let emotions = config.emotions;
        let resolutions = config
            .thresholds
            .iter()
            .map(|&tau| {
                let mut active_words = vec![true];
                active_words.extend(intensity.iter().map(|&c| c >= tau));
                let active_emotions = vec![true; emotions];
                let adjacency = adjacency(&active_words, &active_emotions);
                Resolution { threshold: tau, active_words, active_emotions, adjacency }
            })
            .collect();
        Self { words, emotions, resolutions }
    }

    /// A copy with `removed` emotion nodes and all their edges deleted from every resolution.
    pub fn without_emotions(&self, removed: &BTreeSet<usize>) -> Self {
        let mut out = self.clone();
        for r in &mut out.resolutions {
            for &e in removed {
                r.active_emotions[e] = false;
            }
            r.adjacency = adjacency(&r.active_words, &r.active_emotions);
        }
        out
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn emotions(&self) -> usize {
        self.emotions
    }

    pub fn nodes(&self) -> usize {
        self.words + self.emotions
    }

    pub fn resolutions(&self) -> &[Resolution] {
        &self.resolutions
    }

    pub fn adjacency(&self, k: usize) -> &[bool] {
        &self.resolutions[k].adjacency
    }

    /// Nodes that node `i` attends to in resolution `k`.
    pub fn in_neighbors(&self, k: usize, i: usize) -> Vec<usize> {
        let n = self.nodes();
        (0..n).filter(|&j| self.resolutions[k].adjacency[i * n + j]).collect()
    }

    /// Indices of the active word nodes in resolution `k`.
    pub fn active_words(&self, k: usize) -> BTreeSet<usize> {
        self.resolutions[k].active_words.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
    }
}

/// Word `i` → earlier active words and every active emotion; emotion →
/// every other active emotion; every active node → `[CLS]` (including itself).
fn adjacency(active_words: &[bool], active_emotions: &[bool]) -> Vec<bool> {
    let m = active_words.len();
    let n = m + active_emotions.len();
    let present = |v: usize| if v < m { active_words[v] } else { active_emotions[v - m] };
    let mut adj = vec![false; n * n];
    for i in (0..n).filter(|&i| present(i)) {
        adj[i * n] = true;
        for j in (0..n).filter(|&j| present(j)) {
            let edge = match (i < m, j < m) {
                (true, true) => j < i,
                (true, false) => true,
                (false, false) => i != j,
                (false, true) => false,
            };
            if edge {
                adj[i * n + j] = true;
            }
        }
    }
    adj
}
