//! Context embedding and the bidirectional transformer encoder.

use std::io::BufRead;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::corpus::{TokenizedInstance, Vocabulary};
use crate::nn::{AttentionParams, Ctx, FeedForwardParams, LayerNormParams};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// `[V × D]`, shared with the decoder and the emotion nodes.
    pub word: ParamId,
    /// `[max_len × D]`.
    pub position: ParamId,
    /// `[3 × D]`: `[CLS]`, speaker, listener.
    pub state: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub max_len: usize,
    pub eps: f64,
}

pub struct EncoderShape {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub eps: f64,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, shape: &EncoderShape, range: f64, rng: &mut R) -> Self {
        let d = shape.d_model;
        let word = store.add_uniform("embed.word", &[shape.vocab, d], range, rng);
        let position = store.add_uniform("embed.position", &[shape.max_len, d], range, rng);
        let state = store.add_uniform("embed.state", &[3, d], range, rng);
        let blocks = (0..shape.layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderBlock {
                    attention: AttentionParams::new(store, &format!("{p}.attention"), d, shape.heads, range, rng),
                    norm1: LayerNormParams::new(store, &format!("{p}.norm1"), d),
                    ffn: FeedForwardParams::new(store, &format!("{p}.ffn"), d, 4 * d, range, rng),
                    norm2: LayerNormParams::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Self { word, position, state, blocks, max_len: shape.max_len, eps: shape.eps }
    }
}

/// Output of [`encode`].
#[derive(Clone, Debug)]
pub struct ContextEncoding {
    /// `[M × D]` input embeddings.
    pub x: Var,
    /// `[M × D]` contextual representation.
    pub h: Var,
    /// `[1 × D]` row mean of `h`.
    pub pooled: Var,
    /// Per block, per head self-attention weights.
    pub attention: Vec<Vec<Var>>,
}

/// `x[i] = e_w[token_i] + e_p[i] + e_d[state_i]`.
pub fn embed(ctx: &mut Ctx, inst: &TokenizedInstance, params: &EncoderParams) -> Result<Var> {
    let m = inst.tokens.len();
    if m > params.max_len {
        return Err(Error::Invalid(format!("context length {m} exceeds maximum {}", params.max_len)));
    }
    let w = ctx.tape.embedding(ctx.p(params.word), &inst.tokens)?;
    let p = ctx.tape.embedding(ctx.p(params.position), &inst.positions)?;
    let s = ctx.tape.embedding(ctx.p(params.state), &inst.states)?;
    let wp = ctx.tape.add(w, p)?;
    Ok(ctx.tape.add(wp, s)?)
}

/// Runs the encoder blocks (no causal mask) over `x`.
pub fn encode(ctx: &mut Ctx, x: Var, params: &EncoderParams) -> Result<ContextEncoding> {
    let mut h = ctx.dropout(x)?;
    let mut attention = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let att = block.attention.apply(ctx, h, h, false)?;
        attention.push(att.weights);
        let a = ctx.dropout(att.output)?;
        let r = ctx.tape.add(h, a)?;
        h = block.norm1.apply(ctx, r, params.eps)?;
        let f = block.ffn.apply(ctx, h)?;
        let f = ctx.dropout(f)?;
        let r = ctx.tape.add(h, f)?;
        h = block.norm2.apply(ctx, r, params.eps)?;
    }
    let pooled = ctx.tape.mean(h, 0)?;
    Ok(ContextEncoding { x, h, pooled, attention })
}

/// Overwrites rows of the `[V × D]` table `table` with vectors from a
/// whitespace-separated `word v1 … vD` file. Returns the number of rows set.
pub fn load_word_vectors(path: &Path, vocab: &Vocabulary, table: &mut Tensor) -> Result<usize> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (_, d) = table.dims2();
    let mut hits = 0;
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let Some(id) = vocab.get(word) else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse { path: path.to_path_buf(), line: n + 1, message: "bad number".into() })?;
        if values.len() != d {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("expected {d} values, found {}", values.len()),
            });
        }
        table.data_mut()[id * d..(id + 1) * d].copy_from_slice(&values);
        hits += 1;
    }
    Ok(hits)
}
