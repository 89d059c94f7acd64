//! Emotion perception, gating, the soft/hard strategies and the response decoder.

mod strategy;

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::graph::{diagonal_mask, graph_forward, init_edges, GraphOutputs, GraphParams};
use crate::nn::{AttentionParams, Ctx, FeedForwardParams, LayerNormParams};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

pub use strategy::{
    apply_strategy, otsu_split, ranking, top_k, OtsuSplit, Strategy, StrategyOutcome, StrategyPlan, MAX_RELEVANT,
    SOFT_TOP,
};

#[derive(Clone, Debug)]
pub struct PerceptionHead {
    /// `[P × 2P]`.
    pub w_eps: ParamId,
    /// `[P × D]`.
    pub w_x: ParamId,
}

impl PerceptionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, p: usize, d: usize, range: f64, rng: &mut R) -> Self {
        Self {
            w_eps: store.add_uniform("perception.w_eps", &[p, 2 * p], range, rng),
            w_x: store.add_uniform("perception.w_x", &[p, d], range, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PerceptionOutput {
    /// `[1 × P]` global perception signal.
    pub h_g: Var,
    /// `[1 × P]` main perception logits.
    pub h_m: Var,
    /// `[1 × P]` `softmax(h_m)`.
    pub distribution: Var,
    pub predicted: usize,
}

/// Index of the largest value, the lowest index among ties.
pub fn argmax(values: &[f64]) -> usize {
    ranking(values)[0]
}

pub fn perceive(ctx: &mut Ctx, outputs: &GraphOutputs, pooled: Var, head: &PerceptionHead) -> Result<PerceptionOutput> {
    let p = ctx.tape.shape(outputs.emotion_emotion)[0];
    let eee = ctx.tape.masked_fill(outputs.emotion_emotion, diagonal_mask(p), 1.0)?;
    let col_sums = ctx.tape.sum(outputs.word_emotion, 0)?;
    let h_g = ctx.tape.linear(col_sums, eee)?;
    let context = ctx.tape.linear(pooled, ctx.p(head.w_x))?;
    let joined = ctx.tape.concat(&[h_g, context], 1)?;
    let h_m = ctx.tape.linear(joined, ctx.p(head.w_eps))?;
    let distribution = ctx.tape.softmax(h_m, 1)?;
    let predicted = argmax(ctx.tape.value(h_m).data());
    Ok(PerceptionOutput { h_g, h_m, distribution, predicted })
}

#[derive(Clone, Debug)]
pub struct GateParams {
    /// `[P × P]`.
    pub w_e: ParamId,
}

impl GateParams {
    pub fn new<R: Rng>(store: &mut ParamStore, p: usize, range: f64, rng: &mut R) -> Self {
        Self { w_e: store.add_uniform("gate.w_e", &[p, p], range, rng) }
    }
}

/// `h_emo = σ(h_g W_eᵀ) ⊙ h_m + h_m`.
pub fn gate(ctx: &mut Ctx, h_g: Var, h_m: Var, params: &GateParams) -> Result<Var> {
    let z = ctx.tape.linear(h_g, ctx.p(params.w_e))?;
    let g = ctx.tape.sigmoid(z)?;
    let gated = ctx.tape.mul(g, h_m)?;
    Ok(ctx.tape.add(gated, h_m)?)
}

/// Second graph pass over the strategy-modified graph with shared parameters.
pub fn improved_forward(
    ctx: &mut Ctx,
    h0: Var,
    intensity: &[f64],
    correlation: Var,
    plan: &StrategyPlan,
    params: &GraphParams,
) -> Result<GraphOutputs> {
    let edges = init_edges(ctx, intensity, correlation, &plan.topology, plan.edge_override)?;
    graph_forward(ctx, h0, &edges, &plan.topology, params)
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attention: AttentionParams,
    pub cross_attention: AttentionParams,
    /// `[D × 2D]` fusion of cross-attention output and node summary.
    pub fusion: ParamId,
    pub norm1: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// `[max_len × D]`.
    pub position: ParamId,
    pub blocks: Vec<DecoderBlock>,
    /// `[V × D]`.
    pub output: ParamId,
    pub max_len: usize,
    pub eps: f64,
}

pub struct DecoderShape {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub eps: f64,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, shape: &DecoderShape, range: f64, rng: &mut R) -> Self {
        let d = shape.d_model;
        let position = store.add_uniform("decoder.position", &[shape.max_len, d], range, rng);
        let blocks = (0..shape.layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderBlock {
                    self_attention: AttentionParams::new(store, &format!("{p}.self"), d, shape.heads, range, rng),
                    cross_attention: AttentionParams::new(store, &format!("{p}.cross"), d, shape.heads, range, rng),
                    fusion: store.add_uniform(format!("{p}.fusion"), &[d, 2 * d], range, rng),
                    norm1: LayerNormParams::new(store, &format!("{p}.norm1"), d),
                    ffn: FeedForwardParams::new(store, &format!("{p}.ffn"), d, 4 * d, range, rng),
                    norm2: LayerNormParams::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        let output = store.add_uniform("decoder.output", &[shape.vocab, d], range, rng);
        Self { position, blocks, output, max_len: shape.max_len, eps: shape.eps }
    }
}

/// Teacher-forced logits `[T × V]` for `prefix` (which starts with `[BOS]`).
pub fn decode(
    ctx: &mut Ctx,
    prefix: &[usize],
    word_table: Var,
    h_x: Var,
    h_node: Var,
    params: &DecoderParams,
) -> Result<Var> {
    let t = prefix.len();
    if t == 0 {
        return Err(Error::Invalid("decoder prefix is empty".into()));
    }
    if t > params.max_len {
        return Err(Error::Invalid(format!("decoder prefix length {t} exceeds maximum {}", params.max_len)));
    }
    let positions: Vec<usize> = (0..t).collect();
    let w = ctx.tape.embedding(word_table, prefix)?;
    let pos = ctx.tape.embedding(ctx.p(params.position), &positions)?;
    let y = ctx.tape.add(w, pos)?;
    let mut s = ctx.dropout(y)?;
    let summary = ctx.tape.sum(h_node, 0)?;
    let ones = ctx.constant(Tensor::full(&[t, 1], 1.0));
    let summary = ctx.tape.mul(ones, summary)?;
    for block in &params.blocks {
        let own = block.self_attention.apply(ctx, s, s, true)?;
        let own = ctx.dropout(own.output)?;
        let st = ctx.tape.add(s, own)?;
        let cross = block.cross_attention.apply(ctx, st, h_x, false)?;
        let joined = ctx.tape.concat(&[cross.output, summary], 1)?;
        let fused = ctx.tape.linear(joined, ctx.p(block.fusion))?;
        let fused = ctx.dropout(fused)?;
        let r = ctx.tape.add(st, fused)?;
        let s_hat = block.norm1.apply(ctx, r, params.eps)?;
        let f = block.ffn.apply(ctx, s_hat)?;
        let f = ctx.dropout(f)?;
        let r = ctx.tape.add(s_hat, f)?;
        s = block.norm2.apply(ctx, r, params.eps)?;
    }
    Ok(ctx.tape.linear(s, ctx.p(params.output))?)
}
