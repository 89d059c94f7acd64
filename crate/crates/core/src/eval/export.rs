use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::DialogueSample;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Off-diagonal weights scaled by their largest magnitude, with the
/// undirected edges above a threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationExport {
    pub emotions: Vec<String>,
    pub threshold: f64,
    /// `[P][P]` normalized weights, diagonal 0.
    pub weights: Vec<Vec<f64>>,
    /// `source < target`, normalized weight strictly above `threshold`.
    pub edges: Vec<Edge>,
}

impl CorrelationExport {
    pub fn from_matrix(matrix: &Tensor, emotions: &[String], threshold: f64) -> Result<Self> {
        let (p, q) = matrix.dims2();
        if p != q || p != emotions.len() {
            return Err(Error::Invalid(format!("{p}×{q} matrix for {} emotions", emotions.len())));
        }
        if p < 2 {
            return Err(Error::Invalid("correlation export needs at least 2 emotions".into()));
        }
        let max = (0..p)
            .flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| matrix.get(i, j).abs())
            .fold(0.0, f64::max);
        if max == 0.0 {
            log::warn!("all off-diagonal weights are zero; exporting no edges");
        }
        let weights: Vec<Vec<f64>> = (0..p)
            .map(|i| (0..p).map(|j| if i == j || max == 0.0 { 0.0 } else { matrix.get(i, j) / max }).collect())
            .collect();
        let mut edges = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if weights[i][j] > threshold {
                    edges.push(Edge { source: i, target: j, weight: weights[i][j] });
                }
            }
        }
        Ok(Self { emotions: emotions.to_vec(), threshold, weights, edges })
    }

    /// Uses pair co-occurrence counts of the samples' gold emotion sets.
    pub fn from_dataset(samples: &[DialogueSample], emotions: &[String], threshold: f64) -> Result<Self> {
        Self::from_matrix(&co_occurrence_matrix(samples, emotions.len())?, emotions, threshold)
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.source, e.target)).collect()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("graph correlation {\n");
        for (i, name) in self.emotions.iter().enumerate() {
            let _ = writeln!(s, "  n{i} [label=\"{name}\"];");
        }
        for e in &self.edges {
            let _ = writeln!(s, "  n{} -- n{} [weight={:.4}, label=\"{:.2}\"];", e.source, e.target, e.weight, e.weight);
        }
        s.push_str("}\n");
        s
    }

    /// Writes `<stem>.json` and `<stem>.dot` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        let dot = dir.join(format!("{stem}.dot"));
        std::fs::write(&dot, self.to_dot()).map_err(|e| Error::io(&dot, e))
    }
}

/// Symmetric `[P × P]` counts of samples whose gold set contains both emotions.
/// Samples without a gold set count as their main emotion alone.
pub fn co_occurrence_matrix(samples: &[DialogueSample], p: usize) -> Result<Tensor> {
    let mut m = Tensor::zeros(&[p, p]);
    for s in samples {
        let set: Vec<usize> = match &s.gold_emotions {
            Some(g) => g.iter().copied().collect(),
            None => vec![s.emotion],
        };
        if let Some(&e) = set.iter().find(|&&e| e >= p) {
            return Err(Error::Invalid(format!("emotion {e} out of range for {p}")));
        }
        for &i in &set {
            for &j in &set {
                m.data_mut()[i * p + j] += 1.0;
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("e{i}")).collect()
    }

    #[test]
    fn single_maximum_gives_one_edge() {
        let mut r = Tensor::identity(4);
        for (i, j, v) in [(0, 2, 0.9), (1, 3, 0.1), (0, 1, 0.2)] {
            r.data_mut()[i * 4 + j] = v;
            r.data_mut()[j * 4 + i] = v;
        }
        let ex = CorrelationExport::from_matrix(&r, &names(4), 0.3).unwrap();
        assert_eq!(ex.edges, vec![Edge { source: 0, target: 2, weight: 1.0 }]);
        let none = CorrelationExport::from_matrix(&r, &names(4), 1.0).unwrap();
        assert!(none.edges.is_empty());
    }

    #[test]
    fn zero_matrix_has_no_edges() {
        let ex = CorrelationExport::from_matrix(&Tensor::identity(3), &names(3), 0.3).unwrap();
        assert!(ex.edges.is_empty());
    }

    #[test]
    fn dot_lists_edges() {
        let mut r = Tensor::identity(2);
        r.data_mut()[1] = 0.5;
        r.data_mut()[2] = 0.5;
        let dot = CorrelationExport::from_matrix(&r, &names(2), 0.3).unwrap().to_dot();
        assert!(dot.contains("n0 -- n1"));
    }
}
