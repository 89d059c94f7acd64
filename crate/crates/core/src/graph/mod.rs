//! Multi-resolution emotion graph: topology, learned emotion correlation,
//! initial edge weights and the layered multi-resolution attention update.

mod topology;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{Ctx, FeedForwardParams};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

pub use topology::{GraphTopology, Resolution};

/// Largest possible word intensity, `(1 − 0.5)²`.
pub const MAX_INTENSITY: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// One nondecreasing threshold per resolution, starting at 0.
    pub thresholds: Vec<f64>,
    pub layers: usize,
    pub emotions: usize,
    pub d_model: usize,
}

impl GraphConfig {
    pub fn resolutions(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.thresholds.len();
        if k == 0 {
            return Err(Error::Config("at least one resolution threshold is required".into()));
        }
        if self.thresholds[0] != 0.0 {
            return Err(Error::Config(format!("first threshold must be 0, got {}", self.thresholds[0])));
        }
        if self.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("thresholds {:?} must be nondecreasing", self.thresholds)));
        }
        if let Some(t) = self.thresholds.iter().find(|&&t| t >= MAX_INTENSITY) {
            return Err(Error::Config(format!("threshold {t} is not below the maximum intensity 0.25")));
        }
        if self.d_model % k != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by {k} resolutions", self.d_model)));
        }
        if self.emotions < 2 {
            return Err(Error::Config("at least two emotions are required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ResolutionParams {
    /// `[D × D/K]` each.
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// `[D × 1]` projection producing per-node edge gates.
    pub edge_value: ParamId,
}

#[derive(Clone, Debug)]
pub struct GraphLayerParams {
    pub resolutions: Vec<ResolutionParams>,
    /// `[1 × 1]` edge scale.
    pub edge_scale: ParamId,
    /// Fusion MLP over the concatenated resolution messages.
    pub fusion: FeedForwardParams,
}

#[derive(Clone, Debug)]
pub struct GraphParams {
    /// `[P × P]` re-parameterization of the correlation matrix.
    pub correlation: ParamId,
    pub layers: Vec<GraphLayerParams>,
}

impl GraphParams {
    /// Weights from uniform(−range, range); `S` starts at identity plus small noise.
    pub fn new<R: Rng>(store: &mut ParamStore, config: &GraphConfig, range: f64, rng: &mut R) -> Self {
        let (p, d, k) = (config.emotions, config.d_model, config.resolutions());
        let mut s = Tensor::identity(p);
        for v in s.data_mut() {
            *v += 0.01 * rng.gen_range(-1.0..=1.0);
        }
        let correlation = store.add("graph.correlation", s);
        let layers = (0..config.layers)
            .map(|l| {
                let resolutions = (0..k)
                    .map(|r| {
                        let p = format!("graph.{l}.res{r}");
                        ResolutionParams {
                            query: store.add_uniform(format!("{p}.query"), &[d, d / k], range, rng),
                            key: store.add_uniform(format!("{p}.key"), &[d, d / k], range, rng),
                            value: store.add_uniform(format!("{p}.value"), &[d, d / k], range, rng),
                            edge_value: store.add_uniform(format!("{p}.edge_value"), &[d, 1], range, rng),
                        }
                    })
                    .collect();
                GraphLayerParams {
                    resolutions,
                    edge_scale: store.add_uniform(format!("graph.{l}.edge_scale"), &[1, 1], range, rng),
                    fusion: FeedForwardParams::new(store, &format!("graph.{l}.fusion"), d, d, range, rng),
                }
            })
            .collect();
        Self { correlation, layers }
    }
}

/// `R = Ŝᵀ Ŝ` with `Ŝ` the column-normalized `S`, diagonal forced to 1.
pub fn correlation_matrix(tape: &mut Tape, s: Var) -> Result<Var> {
    let (p, q) = tape.value(s).dims2();
    if p != q {
        return Err(Error::Invalid(format!("correlation parameter must be square, got {p}×{q}")));
    }
    let sv = tape.value(s);
    for col in 0..p {
        if (0..p).all(|row| sv.get(row, col) == 0.0) {
            return Err(Error::Invalid(format!("correlation parameter column {col} is zero")));
        }
    }
    let sq = tape.mul(s, s)?;
    let norm2 = tape.sum(sq, 0)?;
    let norm = tape.sqrt(norm2)?;
    let unit = tape.div(s, norm)?;
    let unit_t = tape.transpose(unit)?;
    let gram = tape.matmul(unit_t, unit)?;
    Ok(tape.masked_fill(gram, diagonal_mask(p), 1.0)?)
}

/// Value-only [`correlation_matrix`].
pub fn correlation_values(s: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let r = correlation_matrix(&mut tape, sv)?;
    Ok(tape.value(r).clone())
}

pub(crate) fn diagonal_mask(p: usize) -> Vec<bool> {
    (0..p * p).map(|i| i / p == i % p).collect()
}

/// Initial edge weights, one `[N × N]` tensor per resolution (zero where no edge).
///
/// Word → word `c_j / max(c)`, word → emotion `1/P` (or `soft_override[j]`),
/// emotion → emotion row-softmax of `R` over the other emotions, and any
/// node → `[CLS]` weight 1.
pub fn init_edges(
    ctx: &mut Ctx,
    intensity: &[f64],
    correlation: Var,
    topology: &GraphTopology,
    soft_override: Option<Var>,
) -> Result<Vec<Var>> {
    let (m, p) = (topology.words(), topology.emotions());
    if intensity.len() + 1 != m {
        return Err(Error::Invalid(format!("{} intensities for {m} word nodes", intensity.len())));
    }
    let max_c = intensity.iter().copied().fold(0.0, f64::max);
    if max_c == 0.0 && m > 2 {
        log::warn!("all-neutral context: word-to-word edge weights set to 0");
    }
    let mut ww = Tensor::zeros(&[m, m]);
    for i in 0..m {
        ww.data_mut()[i * m] = 1.0;
        for j in 1..i {
            ww.data_mut()[i * m + j] = if max_c > 0.0 { intensity[j - 1] / max_c } else { 0.0 };
        }
    }
    let ww = ctx.constant(ww);
    let we = match soft_override {
        None => ctx.constant(Tensor::full(&[m, p], 1.0 / p as f64)),
        Some(label) => {
            let ones = ctx.constant(Tensor::full(&[m, 1], 1.0));
            ctx.tape.mul(ones, label)?
        }
    };
    let mut ew = Tensor::zeros(&[p, m]);
    for e in 0..p {
        ew.data_mut()[e * m] = 1.0;
    }
    let ew = ctx.constant(ew);
    let off_diag: Vec<bool> = diagonal_mask(p).into_iter().map(|d| !d).collect();
    let ee = ctx.tape.masked_softmax(correlation, 1, off_diag, true)?;
    let top = ctx.tape.concat(&[ww, we], 1)?;
    let bottom = ctx.tape.concat(&[ew, ee], 1)?;
    let full = ctx.tape.concat(&[top, bottom], 0)?;
    topology
        .resolutions()
        .iter()
        .map(|r| Ok(ctx.tape.masked_fill(full, r.adjacency().iter().map(|&a| !a).collect(), 0.0)?))
        .collect()
}

/// Result of [`graph_forward`].
#[derive(Clone, Debug)]
pub struct GraphOutputs {
    /// `[M × P]` word → emotion weights summed over resolutions.
    pub word_emotion: Var,
    /// `[P × P]` emotion → emotion weights summed over resolutions.
    pub emotion_emotion: Var,
    /// `[M × D]` final word-node features.
    pub node_features: Var,
    /// Final per-resolution `[N × N]` edge weights.
    pub edges: Vec<Var>,
    /// `[layer][resolution]` attention weights.
    pub attention: Vec<Vec<Var>>,
}

/// Runs `params.layers` rounds of multi-resolution attention from node
/// features `h0` (`[N × D]`) and initial edges `edges0`.
pub fn graph_forward(
    ctx: &mut Ctx,
    h0: Var,
    edges0: &[Var],
    topology: &GraphTopology,
    params: &GraphParams,
) -> Result<GraphOutputs> {
    let (m, p, n) = (topology.words(), topology.emotions(), topology.nodes());
    let k_count = topology.resolutions().len();
    if edges0.len() != k_count {
        return Err(Error::Invalid(format!("{} edge sets for {k_count} resolutions", edges0.len())));
    }
    let (rows, d) = ctx.tape.value(h0).dims2();
    if rows != n || d % k_count != 0 {
        return Err(Error::Invalid(format!("node features {rows}×{d} do not match {n} nodes")));
    }
    let scale = 1.0 / ((d / k_count) as f64).sqrt();
    let masks: Vec<Vec<bool>> = topology.resolutions().iter().map(|r| r.adjacency().to_vec()).collect();
    let mut h = h0;
    let mut edges = edges0.to_vec();
    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut messages = Vec::with_capacity(k_count);
        let mut next_edges = Vec::with_capacity(k_count);
        let mut layer_attention = Vec::with_capacity(k_count);
        for (k, res) in layer.resolutions.iter().enumerate() {
            let q = ctx.tape.matmul(h, ctx.p(res.query))?;
            let key = ctx.tape.matmul(h, ctx.p(res.key))?;
            let v = ctx.tape.matmul(h, ctx.p(res.value))?;
            let kt = ctx.tape.transpose(key)?;
            let scores = ctx.tape.matmul(q, kt)?;
            let scores = ctx.tape.scale(scores, scale)?;
            let raw = ctx.tape.mul(scores, edges[k])?;
            let attn = ctx.tape.masked_softmax(raw, 1, masks[k].clone(), true)?;
            messages.push(ctx.tape.matmul(attn, v)?);
            layer_attention.push(attn);

            let gate = ctx.tape.matmul(h, ctx.p(res.edge_value))?;
            let gate = ctx.tape.transpose(gate)?;
            let summed = ctx.tape.add(edges[k], raw)?;
            let scaled = ctx.tape.mul(summed, ctx.p(layer.edge_scale))?;
            let updated = ctx.tape.mul(gate, scaled)?;
            let removed: Vec<bool> = masks[k].iter().map(|&a| !a).collect();
            next_edges.push(ctx.tape.masked_fill(updated, removed, 0.0)?);
        }
        let joined = if messages.len() == 1 { messages[0] } else { ctx.tape.concat(&messages, 1)? };
        h = layer.fusion.apply(ctx, joined)?;
        edges = next_edges;
        attention.push(layer_attention);
    }
    let total = edges[1..].iter().try_fold(edges[0], |acc, &e| ctx.tape.add(acc, e))?;
    let word_rows = ctx.tape.slice(total, 0, 0, m)?;
    let word_emotion = ctx.tape.slice(word_rows, 1, m, p)?;
    let emotion_rows = ctx.tape.slice(total, 0, m, p)?;
    let emotion_emotion = ctx.tape.slice(emotion_rows, 1, m, p)?;
    let node_features = ctx.tape.slice(h, 0, 0, m)?;
    Ok(GraphOutputs { word_emotion, emotion_emotion, node_features, edges, attention })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn identity_gives_identity() {
        let r = correlation_values(&Tensor::identity(4)).unwrap();
        assert_eq!(r, Tensor::identity(4));
    }

    #[test]
    fn equal_columns_have_unit_correlation() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0, 2.0], vec![0.5, 1.0, 1.0], vec![3.0, -1.0, -1.0]]).unwrap();
        let r = correlation_values(&s).unwrap();
        assert!(approx(r.get(1, 2), 1.0));
        for i in 0..3 {
            assert_eq!(r.get(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(r.get(i, j), r.get(j, i));
            }
        }
    }

    #[test]
    fn zero_column_is_rejected() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(correlation_values(&s).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = GraphConfig { thresholds: vec![0.0, 0.075, 0.15], layers: 2, emotions: 32, d_model: 48 };
        assert!(ok.validate().is_ok());
        let typo = GraphConfig { thresholds: vec![0.0, 0.75, 0.15], ..ok.clone() };
        assert!(typo.validate().is_err());
        let bad_d = GraphConfig { d_model: 10, ..ok.clone() };
        assert!(bad_d.validate().is_err());
        let nonzero = GraphConfig { thresholds: vec![0.01], ..ok };
        assert!(nonzero.validate().is_err());
    }
}
