//! Transformer building blocks shared by the encoder and decoder.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::Result;

/// Forward-pass state: the tape, bound parameters, and dropout setting.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Bindings,
    dropout: Option<(f64, u64)>,
    draws: u64,
}

impl<'a> Ctx<'a> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(tape: &'a mut Tape, params: &'a Bindings) -> Self {
        Self { tape, params, dropout: None, draws: 0 }
    }

    /// Training mode: dropout masks derive from `seed` and a draw counter.
    pub fn train(tape: &'a mut Tape, params: &'a Bindings, rate: f64, seed: u64) -> Self {
        let dropout = (rate > 0.0).then_some((rate, seed));
        Self { tape, params, dropout, draws: 0 }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, seed)) = self.dropout else { return Ok(x) };
        self.draws += 1;
        let mixed = seed ^ self.draws.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(self.tape.dropout(x, rate, mixed)?)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var, eps: f64) -> Result<Var> {
        Ok(ctx.tape.layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), eps)?)
    }
}

/// Multi-head attention with `[D × D]` projections applied as `x · W`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, range: f64, rng: &mut R) -> Self {
        Self {
            query: store.add_uniform(format!("{prefix}.query"), &[d, d], range, rng),
            key: store.add_uniform(format!("{prefix}.key"), &[d, d], range, rng),
            value: store.add_uniform(format!("{prefix}.value"), &[d, d], range, rng),
            output: store.add_uniform(format!("{prefix}.output"), &[d, d], range, rng),
            heads,
        }
    }

    /// Attends from rows of `queries` to rows of `memory`. With `causal`,
    /// row `i` sees memory rows `0..=i` only.
    pub fn apply(&self, ctx: &mut Ctx, queries: Var, memory: Var, causal: bool) -> Result<AttentionOutput> {
        let q = ctx.tape.matmul(queries, ctx.p(self.query))?;
        let k = ctx.tape.matmul(memory, ctx.p(self.key))?;
        let v = ctx.tape.matmul(memory, ctx.p(self.value))?;
        let (tq, d) = ctx.tape.value(q).dims2();
        let tk = ctx.tape.shape(k)[0];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = causal.then(|| (0..tq * tk).map(|i| i % tk <= i / tk).collect::<Vec<_>>());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.tape.slice(q, 1, h * dh, dh)?;
            let kh = ctx.tape.slice(k, 1, h * dh, dh)?;
            let vh = ctx.tape.slice(v, 1, h * dh, dh)?;
            let kt = ctx.tape.transpose(kh)?;
            let scores = ctx.tape.matmul(qh, kt)?;
            let scores = ctx.tape.scale(scores, scale)?;
            let attn = match &mask {
                Some(m) => ctx.tape.masked_softmax(scores, 1, m.clone(), false)?,
                None => ctx.tape.softmax(scores, 1)?,
            };
            outs.push(ctx.tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let joined = if outs.len() == 1 { outs[0] } else { ctx.tape.concat(&outs, 1)? };
        let output = ctx.tape.matmul(joined, ctx.p(self.output))?;
        Ok(AttentionOutput { output, weights })
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head `[Tq × Tk]` attention weights.
    pub weights: Vec<Var>,
}

/// Two-layer ReLU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, range: f64, rng: &mut R) -> Self {
        Self {
            w1: store.add_uniform(format!("{prefix}.w1"), &[d, hidden], range, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden])),
            w2: store.add_uniform(format!("{prefix}.w2"), &[hidden, d], range, rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = ctx.tape.matmul(x, ctx.p(self.w1))?;
        let h = ctx.tape.add(h, ctx.p(self.b1))?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.tape.matmul(h, ctx.p(self.w2))?;
        Ok(ctx.tape.add(h, ctx.p(self.b2))?)
    }
}
