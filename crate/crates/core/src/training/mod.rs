//! Losses, optimizer, the training loop, checkpoints and model gradient checks.

mod checkpoint;
mod loss;
mod optim;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, GradCheckReport, Tape, Tensor, Var};
use crate::corpus::{Taxonomy, TokenizedInstance, Vocabulary, BOS_ID, CLS_ID, EOS_ID};
use crate::decoder::Strategy;
use crate::model::{Model, ModelConfig};
use crate::nn::Ctx;
use crate::params::Bindings;
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use loss::{eco_loss, emo_loss, gen_loss, loss_eco, loss_emo, loss_gen, GenLoss};
pub use optim::{clip_grad_norm, Adam, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub gamma1: f64,
    pub gamma2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub warmup_steps: u64,
    /// Rate reached after warmup and kept for the rest of training.
    pub learning_rate: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Hard,
            gamma1: 1.0,
            gamma2: 1.0,
            batch_size: 16,
            epochs: 10,
            dropout: 0.2,
            warmup_steps: 100,
            learning_rate: 3.5e-4,
            label_smoothing: 0.1,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return bad("gamma1 and gamma2 must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { rate: self.learning_rate, warmup: self.warmup_steps }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            strategy: self.strategy,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            smoothing: self.label_smoothing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub strategy: Strategy,
    pub gamma1: f64,
    pub gamma2: f64,
    pub smoothing: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gen: f64,
    pub emo: f64,
    pub eco: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(gen: f64, emo: f64, eco: f64, gamma1: f64, gamma2: f64) -> Self {
        Self { gen, emo, eco, total: gen + gamma1 * emo + gamma2 * eco }
    }
}

/// One training-log record: `step, L_gen, L_emo, L_eco, total, lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(f, "{}, {:.6}, {:.6}, {:.6}, {:.6}, {:.3e}", self.step, l.gen, l.emo, l.eco, l.total, self.lr)
    }
}

/// Joint loss of one instance, recorded on the tape.
pub struct InstanceLoss {
    pub gen: Var,
    pub emo: Var,
    pub eco: Var,
    pub total: Var,
    /// Unsmoothed generation NLL and its token count.
    pub nll: f64,
    pub tokens: usize,
    pub predicted: usize,
    /// Emotion set used by the correlation loss.
    pub selected: BTreeSet<usize>,
}

pub fn instance_loss(model: &Model, ctx: &mut Ctx, inst: &TokenizedInstance, w: &LossWeights) -> Result<InstanceLoss> {
    let fwd = model.forward(ctx, inst, w.strategy)?;
    let targets = &inst.response[1..];
    let g = gen_loss(ctx.tape, fwd.logits, targets, w.smoothing)?;
    let emo = emo_loss(ctx.tape, fwd.perceived.perception.h_m, inst.emotion)?;
    let selected = fwd.perceived.plan.outcome.selected.clone();
    let eco = eco_loss(ctx.tape, fwd.perceived.correlation, &selected)?;
    let a = ctx.tape.scale(emo, w.gamma1)?;
    let b = ctx.tape.scale(eco, w.gamma2)?;
    let t = ctx.tape.add(g.loss, a)?;
    let total = ctx.tape.add(t, b)?;
    Ok(InstanceLoss {
        gen: g.loss,
        emo,
        eco,
        total,
        nll: g.nll,
        tokens: g.tokens,
        predicted: fwd.perceived.perception.predicted,
        selected,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(a)) ^ b)
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Adam,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params.tensors());
        Ok(Self { model, config, optimizer, step: 0 })
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// Sample indices of the batch for the 0-based global `step`: each epoch
    /// visits a fresh seeded permutation.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let per = self.steps_per_epoch(n).max(1);
        let epoch = step / per;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 0xE90C, epoch)));
        let b = (step % per) as usize * self.config.batch_size;
        order[b..(b + self.config.batch_size).min(n)].to_vec()
    }

    /// Forward, backward and one Adam update over `batch`.
    pub fn train_step(&mut self, batch: &[TokenizedInstance]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let w = self.config.weights();
        let n = batch.len() as f64;
        let mut grads: Vec<Tensor> = self.model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut gen, mut emo, mut eco) = (0.0, 0.0, 0.0);
        for (i, inst) in batch.iter().enumerate() {
            let mut tape = Tape::new();
            let bindings = self.model.params.bind(&mut tape);
            let seed = derive_seed(self.config.seed, self.step, i as u64);
            let mut ctx = Ctx::train(&mut tape, &bindings, self.config.dropout, seed);
            let loss = instance_loss(&self.model, &mut ctx, inst, &w)?;
            for (name, var) in [("L_gen", loss.gen), ("L_emo", loss.emo), ("L_eco", loss.eco)] {
                if !tape.value(var).is_finite() {
                    return Err(Error::NonFinite(format!("{name} at step {}", self.step + 1)));
                }
            }
            gen += tape.value(loss.gen).data()[0];
            emo += tape.value(loss.emo).data()[0];
            eco += tape.value(loss.eco).data()[0];
            let g = tape.backward(loss.total)?;
            for (acc, &var) in grads.iter_mut().zip(bindings.vars()) {
                if let Some(d) = g.get(var) {
                    acc.data_mut().iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
            }
        }
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient at step {}", self.step + 1)));
            }
        }
        if let Some(c) = self.config.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        self.step += 1;
        let lr = self.config.schedule().at(self.step);
        self.optimizer.update(self.model.params.tensors_mut(), &grads, lr);
        let loss = LossBreakdown::new(gen / n, emo / n, eco / n, w.gamma1, w.gamma2);
        Ok(StepRecord { step: self.step, loss, lr })
    }

    /// Runs until `self.step == until`, calling `on_step` after each update.
    pub fn train_until(
        &mut self,
        data: &[TokenizedInstance],
        until: u64,
        mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::Invalid("no training instances".into()));
        }
        let mut log = Vec::new();
        while self.step < until {
            let batch: Vec<TokenizedInstance> =
                self.batch_indices(data.len(), self.step).into_iter().map(|i| data[i].clone()).collect();
            let rec = self.train_step(&batch)?;
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Small configuration for whole-model gradient checks. The wide init range
/// keeps weakly coupled gradients well above finite-difference roundoff.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        graph_layers: 1,
        thresholds: vec![0.0, 0.075],
        emotions: 4,
        max_len: 8,
        init_range: 1.0,
        layer_norm_eps: 1e-9,
    }
}

/// A fixed 5-word context with mixed intensities and a 3-token response.
pub fn toy_instance(vocab: &mut Vocabulary) -> TokenizedInstance {
    let words = ["i", "lost", "my", "old", "dog"];
    let mut tokens = vec![CLS_ID];
    tokens.extend(words.iter().map(|w| vocab.insert(w)));
    let mut response = vec![BOS_ID];
    response.extend(["so", "sorry"].iter().map(|w| vocab.insert(w)));
    response.push(EOS_ID);
    TokenizedInstance {
        positions: (0..tokens.len()).collect(),
        states: vec![0, 1, 1, 1, 2, 2],
        intensity: vec![0.0, 0.2, 0.01, 0.09, 0.16],
        tokens,
        response,
        emotion: 1,
        gold_emotions: None,
    }
}

/// Finite-difference check of the full joint loss over every parameter.
/// Strategy decisions are recorded once and held fixed across perturbations.
pub fn grad_check_model(
    config: &ModelConfig,
    strategy: Strategy,
    seed: u64,
    epsilon: f64,
    gamma2: f64,
) -> Result<GradCheckReport> {
    let mut vocab = Vocabulary::default();
    let inst = toy_instance(&mut vocab);
    let model = Model::new(config.clone(), vocab, Taxonomy::first(config.emotions), seed)?;
    let params: Vec<(String, Tensor)> = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let w = LossWeights { strategy, gamma1: 1.0, gamma2, smoothing: 0.1 };
    finite_difference_check(
        |tape: &mut Tape, vars: &[Var], _| {
            let bindings = Bindings::from_vars(vars.to_vec());
            let mut ctx = Ctx::eval(tape, &bindings);
            Ok::<_, Error>(instance_loss(&model, &mut ctx, &inst, &w)?.total)
        },
        &params,
        epsilon,
        seed,
    )
}
