//! The full network: encoder, emotion graph, perception, strategy and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Taxonomy, TokenizedInstance, Vocabulary, EOS_ID};
use crate::decoder::{
    apply_strategy, decode, gate, improved_forward, perceive, DecoderParams, DecoderShape, GateParams,
    PerceptionHead, PerceptionOutput, Strategy, StrategyPlan,
};
use crate::encoder::{embed, encode, ContextEncoding, EncoderParams, EncoderShape};
use crate::graph::{correlation_matrix, graph_forward, init_edges, GraphConfig, GraphOutputs, GraphParams, GraphTopology};
use crate::nn::Ctx;
use crate::params::{Bindings, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub graph_layers: usize,
    pub thresholds: Vec<f64>,
    pub emotions: usize,
    /// Longest context (including `[CLS]`) and response prefix.
    pub max_len: usize,
    pub init_range: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 300,
            heads: 3,
            encoder_layers: 4,
            decoder_layers: 4,
            graph_layers: 2,
            thresholds: vec![0.0, 0.075, 0.15],
            emotions: 32,
            max_len: 512,
            init_range: 0.02,
            layer_norm_eps: 1e-9,
        }
    }
}

impl ModelConfig {
    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            thresholds: self.thresholds.clone(),
            layers: self.graph_layers,
            emotions: self.emotions,
            d_model: self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(self.init_range > 0.0) || !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("init_range and layer_norm_eps must be positive".into()));
        }
        self.graph().validate()
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub taxonomy: Taxonomy,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub graph: GraphParams,
    pub perception: PerceptionHead,
    pub gate: GateParams,
    pub decoder: DecoderParams,
    /// Vocabulary id of each emotion name, used for the emotion-node features.
    pub emotion_tokens: Vec<usize>,
}

impl Model {
    /// Emotion names are added to `vocab` so emotion nodes share the word table.
    pub fn new(config: ModelConfig, mut vocab: Vocabulary, taxonomy: Taxonomy, seed: u64) -> Result<Self> {
        config.validate()?;
        if taxonomy.len() != config.emotions {
            return Err(Error::Config(format!(
                "taxonomy has {} emotions but the model expects {}",
                taxonomy.len(),
                config.emotions
            )));
        }
        let emotion_tokens: Vec<usize> = taxonomy.names().iter().map(|n| vocab.insert(n)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, range) = (config.d_model, config.init_range);
        let encoder = EncoderParams::new(
            &mut params,
            &EncoderShape {
                vocab: vocab.len(),
                d_model: d,
                heads: config.heads,
                layers: config.encoder_layers,
                max_len: config.max_len,
                eps: config.layer_norm_eps,
            },
            range,
            &mut rng,
        );
        let graph = GraphParams::new(&mut params, &config.graph(), range, &mut rng);
        let perception = PerceptionHead::new(&mut params, config.emotions, d, range, &mut rng);
        let gate = GateParams::new(&mut params, config.emotions, range, &mut rng);
        let decoder = DecoderParams::new(
            &mut params,
            &DecoderShape {
                vocab: vocab.len(),
                d_model: d,
                heads: config.heads,
                layers: config.decoder_layers,
                max_len: config.max_len,
                eps: config.layer_norm_eps,
            },
            range,
            &mut rng,
        );
        Ok(Self { config, vocab, taxonomy, params, encoder, graph, perception, gate, decoder, emotion_tokens })
    }

    /// `R` from the current parameters.
    pub fn correlation(&self) -> Result<Tensor> {
        crate::graph::correlation_values(self.params.get(self.graph.correlation))
    }

    /// Encoder, both graph passes and perception; everything but the decoder.
    pub fn perceive(&self, ctx: &mut Ctx, inst: &TokenizedInstance, strategy: Strategy) -> Result<Perceived> {
        let x = embed(ctx, inst, &self.encoder)?;
        let encoding = encode(ctx, x, &self.encoder)?;
        let emotions = ctx.tape.embedding(ctx.p(self.encoder.word), &self.emotion_tokens)?;
        let h0 = ctx.tape.concat(&[x, emotions], 0)?;
        let correlation = correlation_matrix(ctx.tape, ctx.p(self.graph.correlation))?;
        let topology = GraphTopology::build(&inst.intensity, &self.config.graph());
        let edges = init_edges(ctx, &inst.intensity, correlation, &topology, None)?;
        let first = graph_forward(ctx, h0, &edges, &topology, &self.graph)?;
        let perception = perceive(ctx, &first, encoding.pooled, &self.perception)?;
        let h_emo = gate(ctx, perception.h_g, perception.h_m, &self.gate)?;
        let plan = apply_strategy(ctx, strategy, h_emo, &topology)?;
        let improved = improved_forward(ctx, h0, &inst.intensity, correlation, &plan, &self.graph)?;
        Ok(Perceived { encoding, correlation, topology, first, perception, h_emo, plan, improved })
    }

    /// Teacher-forced logits over `prefix`.
    pub fn logits(&self, ctx: &mut Ctx, perceived: &Perceived, prefix: &[usize]) -> Result<Var> {
        decode(
            ctx,
            prefix,
            ctx.p(self.encoder.word),
            perceived.encoding.h,
            perceived.improved.node_features,
            &self.decoder,
        )
    }

    /// Full forward with teacher forcing on the gold response.
    pub fn forward(&self, ctx: &mut Ctx, inst: &TokenizedInstance, strategy: Strategy) -> Result<Forward> {
        if inst.response.len() < 2 {
            return Err(Error::Invalid("response must contain [BOS] and at least one target".into()));
        }
        let perceived = self.perceive(ctx, inst, strategy)?;
        let prefix = &inst.response[..inst.response.len() - 1];
        let logits = self.logits(ctx, &perceived, prefix)?;
        Ok(Forward { perceived, logits })
    }

    /// Greedy decoding from `[BOS]` until `[EOS]` or `max_len` emitted tokens.
    pub fn generate(&self, inst: &TokenizedInstance, strategy: Strategy, max_len: usize) -> Result<Generation> {
        let mut tape = Tape::new();
        let bindings = self.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &bindings);
        let perceived = self.perceive(&mut ctx, inst, strategy)?;
        let mut prefix = vec![crate::corpus::BOS_ID];
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        let limit = max_len.min(self.config.max_len - 1);
        while tokens.len() < limit {
            let logits = self.logits(&mut ctx, &perceived, &prefix)?;
            let last = ctx.tape.slice(logits, 0, prefix.len() - 1, 1)?;
            let lp = ctx.tape.log_softmax(last, 1)?;
            let row = ctx.tape.value(lp).data();
            let next = crate::decoder::argmax(row);
            log_probs.push(row[next]);
            if next == EOS_ID {
                break;
            }
            tokens.push(next);
            prefix.push(next);
        }
        let outcome = &perceived.plan.outcome;
        Ok(Generation {
            text: self.vocab.decode(&tokens),
            tokens,
            log_probs,
            emotion: perceived.perception.predicted,
            relevant: outcome.selected.iter().copied().collect(),
            h_emo: outcome.h_emo.clone(),
        })
    }

    /// Records the current parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        self.params.bind(tape)
    }
}

/// Intermediate results of [`Model::perceive`].
pub struct Perceived {
    pub encoding: ContextEncoding,
    pub correlation: Var,
    pub topology: GraphTopology,
    pub first: GraphOutputs,
    pub perception: PerceptionOutput,
    pub h_emo: Var,
    pub plan: StrategyPlan,
    pub improved: GraphOutputs,
}

pub struct Forward {
    pub perceived: Perceived,
    /// `[T × V]` teacher-forced logits, `T = |response| − 1`.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub text: String,
    /// Log-probability of each chosen token, including a final `[EOS]`.
    pub log_probs: Vec<f64>,
    pub emotion: usize,
    /// Relevant set (hard) or top-3 (soft).
    pub relevant: Vec<usize>,
    pub h_emo: Vec<f64>,
}
