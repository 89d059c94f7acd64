use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ecore::autodiff::GradCheckReport;
use ecore::corpus::{
    load_dialogues, synth_corpus, texts, tokenize_instance, write_dialogues, DialogueSample, EmotionWordLexicon,
    SentimentLexicon, SynthConfig, Taxonomy, TokenizedInstance, Utterance, Vocabulary,
};
use ecore::decoder::Strategy;
use ecore::encoder::load_word_vectors;
use ecore::eval::{
    co_occurrence_stats, distinct_n_per_response, evaluate_instance, summarize, CoOccurrenceStats, CorrelationExport,
    InstanceEval, MetricsReport,
};
use ecore::model::{Model, ModelConfig};
use ecore::training::{grad_check_model, Checkpoint, StepRecord, Trainer};
use ecore::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{CliError, EvalConfig, Result, RunConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-4;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Loads a dialogue file, logging how many lines were skipped.
pub fn load_samples(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<DialogueSample>> {
    let report = load_dialogues(path, taxonomy)?;
    if !report.malformed.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), report.malformed.len());
    }
    Ok(report.samples)
}

pub fn tokenize_all(samples: &[DialogueSample], vocab: &Vocabulary, lexicon: &SentimentLexicon) -> Vec<TokenizedInstance> {
    samples.iter().map(|s| tokenize_instance(s, vocab, lexicon)).collect()
}

/// Fails unless the checkpoint was produced for the configured model.
pub fn check_compatible(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    if ckpt.meta.model != cfg.model {
        return Err(Error::Checkpoint(format!(
            "model configuration differs from the run configuration (checkpoint {:?}, config {:?})",
            ckpt.meta.model, cfg.model
        ))
        .into());
    }
    if ckpt.meta.emotions != cfg.taxonomy().names() {
        return Err(Error::Checkpoint("emotion names differ from the run configuration".into()).into());
    }
    Ok(())
}

/// Teacher-forced PPL plus greedy-generation metrics, parallel over instances.
pub fn evaluate(model: &Model, data: &[TokenizedInstance], strategy: Strategy, eval: &EvalConfig) -> Result<MetricsReport> {
    let records: Vec<InstanceEval> = data
        .par_iter()
        .map(|inst| evaluate_instance(model, inst, strategy, eval.max_len))
        .collect::<ecore::Result<_>>()?;
    let mut report = summarize(&records, strategy, &eval.recall_k)?;
    if eval.per_response_dist {
        let generated: Vec<Vec<usize>> = records.iter().map(|r| r.generated.clone()).collect();
        report.dist1 = 100.0 * distinct_n_per_response(&generated, 1);
        report.dist2 = 100.0 * distinct_n_per_response(&generated, 2);
    }
    Ok(report)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    /// Most recent checkpoint.
    pub checkpoint: PathBuf,
    /// One report per epoch when a validation split is configured.
    pub validation: Vec<MetricsReport>,
}

/// Trains for `train.epochs`, writing `epoch-NNN.ckpt`, `last.ckpt` and
/// `train_log.csv` into the checkpoint directory (or `out`).
pub fn train(cfg: &RunConfig, resume: Option<&Path>, out: Option<&Path>) -> Result<TrainOutcome> {
    let data = cfg.data()?;
    let dir = out.unwrap_or(&data.checkpoint_dir).to_path_buf();
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let taxonomy = cfg.taxonomy();
    let lexicon = cfg.sentiment()?;
    let samples = load_samples(&data.train, &taxonomy)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("no training samples in {}", data.train.display())));
    }

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_compatible(&ckpt, cfg)?;
            let mut t = ckpt.trainer()?;
            t.config.epochs = cfg.train.epochs;
            if t.config != cfg.train {
                log::warn!("resuming with the training settings stored in {}", path.display());
            }
            log::info!("resumed from {} at step {}", path.display(), t.step);
            t
        }
        None => {
            let vocab = Vocabulary::build(texts(&samples), data.min_count);
            let mut model = Model::new(cfg.model.clone(), vocab, taxonomy, cfg.train.seed)?;
            if let Some(p) = &data.embeddings {
                let n = load_word_vectors(p, &model.vocab, model.params.get_mut(model.encoder.word))?;
                log::info!("loaded {n} pretrained word vectors");
            }
            Trainer::new(model, cfg.train.clone())?
        }
    };
    log::info!("vocabulary {} tokens, {} parameters", trainer.model.vocab.len(), trainer.model.params.num_values());

    let instances = tokenize_all(&samples, &trainer.model.vocab, &lexicon);
    let valid = match &data.valid {
        Some(p) => tokenize_all(&load_samples(p, &cfg.taxonomy())?, &trainer.model.vocab, &lexicon),
        None => Vec::new(),
    };

    let log_path = dir.join("train_log.csv");
    let mut log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path).map_err(io(&log_path))?
    } else {
        let mut f = File::create(&log_path).map_err(io(&log_path))?;
        writeln!(f, "step, L_gen, L_emo, L_eco, total, lr").map_err(io(&log_path))?;
        f
    };

    let per_epoch = trainer.steps_per_epoch(instances.len());
    let mut outcome = TrainOutcome { steps: Vec::new(), checkpoint: dir.join("last.ckpt"), validation: Vec::new() };
    let first = trainer.step / per_epoch + 1;
    if first > trainer.config.epochs as u64 {
        log::warn!("nothing to do: already at step {}", trainer.step);
    }
    for epoch in first..=trainer.config.epochs as u64 {
        let records = trainer.train_until(&instances, epoch * per_epoch, |_, rec| {
            log::info!("{rec}");
            writeln!(log_file, "{rec}").map_err(io(&log_path))
        })?;
        outcome.steps.extend(records);
        let ckpt = Checkpoint::capture(&trainer);
        let path = dir.join(format!("epoch-{epoch:03}.ckpt"));
        ckpt.save(&path)?;
        ckpt.save(&outcome.checkpoint)?;
        log::info!("epoch {epoch}: saved {}", path.display());
        if !valid.is_empty() {
            let report = evaluate(&trainer.model, &valid, trainer.config.strategy, &cfg.eval)?;
            log::info!("epoch {epoch} validation ppl {:.4} acc {:.2}", report.ppl, report.acc);
            outcome.validation.push(report);
        }
    }
    log_file.flush().map_err(io(&log_path))?;
    Ok(outcome)
}

/// Metrics for `input`, or the configured test (else validation) split.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, input: Option<&Path>, strategy: Strategy) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    check_compatible(&ckpt, cfg)?;
    let model = ckpt.model()?;
    let path = match input {
        Some(p) => p.to_path_buf(),
        None => {
            let data = cfg.data()?;
            data.test
                .clone()
                .or_else(|| data.valid.clone())
                .ok_or_else(|| CliError::Usage("no evaluation file: pass --input or set data.test".into()))?
        }
    };
    let samples = load_samples(&path, &model.taxonomy)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("no samples in {}", path.display())));
    }
    let data = tokenize_all(&samples, &model.vocab, &cfg.sentiment()?);
    evaluate(&model, &data, strategy, &cfg.eval)
}

#[derive(Debug, Deserialize)]
struct GenerateRecord {
    context: Vec<Utterance>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneratedResponse {
    pub response: String,
    pub emotion: String,
    /// Relevant emotions (hard) or the top three (soft).
    pub relevant: Vec<String>,
}

/// Greedy responses for each `{"context": [...]}` line of `input`, written as JSON Lines.
pub fn generate<W: Write>(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    strategy: Strategy,
    out: &mut W,
) -> Result<Vec<GeneratedResponse>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    check_compatible(&ckpt, cfg)?;
    let model = ckpt.model()?;
    let lexicon = cfg.sentiment()?;
    let file = File::open(input).map_err(io(input))?;
    let mut instances = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(input))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerateRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: input.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        let sample = DialogueSample { context: rec.context, response: String::new(), emotion: 0, gold_emotions: None };
        instances.push(tokenize_instance(&sample, &model.vocab, &lexicon));
    }
    let names = |ids: &[usize]| ids.iter().map(|&e| model.taxonomy.name(e).to_string()).collect::<Vec<_>>();
    let responses: Vec<GeneratedResponse> = instances
        .par_iter()
        .map(|inst| {
            let g = model.generate(inst, strategy, cfg.eval.max_len)?;
            Ok(GeneratedResponse { response: g.text, emotion: model.taxonomy.name(g.emotion).into(), relevant: names(&g.relevant) })
        })
        .collect::<ecore::Result<_>>()?;
    for r in &responses {
        let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(io(Path::new("<output>")))?;
    }
    Ok(responses)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub soft: GradCheckReport,
    pub hard: GradCheckReport,
    pub passed: bool,
}

/// Whole-model finite-difference check under both strategies.
pub fn gradcheck(model: &ModelConfig, seed: u64, epsilon: f64) -> Result<GradCheckSummary> {
    let (soft, hard) = rayon::join(
        || grad_check_model(model, Strategy::Soft, seed, epsilon, 1.0),
        || grad_check_model(model, Strategy::Hard, seed, epsilon, 1.0),
    );
    let (soft, hard) = (soft?, hard?);
    let passed = soft.passes(GRADCHECK_TOLERANCE) && hard.passes(GRADCHECK_TOLERANCE);
    Ok(GradCheckSummary { seed, epsilon, tolerance: GRADCHECK_TOLERANCE, soft, hard, passed })
}

pub fn stats(input: &Path, taxonomy: &Taxonomy, lexicon: &EmotionWordLexicon, min_words: usize) -> Result<CoOccurrenceStats> {
    let samples = load_samples(input, taxonomy)?;
    Ok(co_occurrence_stats(&samples, lexicon, min_words))
}

pub enum CorrelationSource<'a> {
    Checkpoint(&'a Path),
    /// Gold co-occurrence counts of a dialogue file.
    Dataset(&'a Path, Taxonomy),
}

/// Writes `<stem>.json` and `<stem>.dot` into `dir`.
pub fn export_corr(source: CorrelationSource, threshold: f64, dir: &Path, stem: &str) -> Result<CorrelationExport> {
    let export = match source {
        CorrelationSource::Checkpoint(path) => {
            let model = Checkpoint::load(path)?.model()?;
            CorrelationExport::from_matrix(&model.correlation()?, model.taxonomy.names(), threshold)?
        }
        CorrelationSource::Dataset(path, taxonomy) => {
            let samples = load_samples(path, &taxonomy)?;
            CorrelationExport::from_dataset(&samples, taxonomy.names(), threshold)?
        }
    };
    export.write(dir, stem)?;
    Ok(export)
}

/// Files written by [`synth`].
#[derive(Debug, Serialize)]
pub struct SynthOutput {
    pub config: PathBuf,
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub sentiment: PathBuf,
    pub emotion_words: PathBuf,
}

/// Writes a planted-pair corpus, its lexicons and a small ready-to-train config.
pub fn synth(config: &SynthConfig, valid: usize, seed: u64, dir: &Path) -> Result<SynthOutput> {
    let total = SynthConfig { samples: config.samples + valid, ..config.clone() };
    let corpus = synth_corpus(&total, seed)?;
    fs::create_dir_all(dir).map_err(io(dir))?;
    let write_jsonl = |name: &str, samples: &[DialogueSample]| -> Result<PathBuf> {
        let path = dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(io(&path))?);
        write_dialogues(&mut w, samples, &corpus.taxonomy).map_err(io(&path))?;
        w.flush().map_err(io(&path))?;
        Ok(path)
    };
    let (train_samples, valid_samples) = corpus.samples.split_at(config.samples);
    let train = write_jsonl("train.jsonl", train_samples)?;
    let valid_path = if valid > 0 { Some(write_jsonl("valid.jsonl", valid_samples)?) } else { None };

    let sentiment = dir.join("sentiment.tsv");
    let mut s = String::from("# word\tpositivity\n");
    for (w, eta) in corpus.sentiment.entries() {
        s.push_str(&format!("{w}\t{eta}\n"));
    }
    fs::write(&sentiment, s).map_err(io(&sentiment))?;

    let emotion_words = dir.join("emotion_words.tsv");
    let mut s = String::from("# emotion\twords\n");
    for (e, name) in corpus.taxonomy.names().iter().enumerate() {
        let words: Vec<String> = corpus.emotion_words.words(e).iter().map(|p| p.join(" ")).collect();
        s.push_str(&format!("{name}\t{}\n", words.join(",")));
    }
    fs::write(&emotion_words, s).map_err(io(&emotion_words))?;

    let names: Vec<String> = corpus.taxonomy.names().iter().map(|n| format!("{n:?}")).collect();
    let valid_line = if valid > 0 { "valid = \"valid.jsonl\"\n" } else { "" };
    let text = format!(
        "[model]\nd_model = 24\nheads = 2\nencoder_layers = 1\ndecoder_layers = 1\ngraph_layers = 1\n\
         thresholds = [0.0, 0.075, 0.15]\nemotions = {p}\nmax_len = 32\n\n\
         [train]\nstrategy = \"hard\"\nbatch_size = 16\nepochs = 30\ndropout = 0.1\nwarmup_steps = 50\n\
         learning_rate = 1e-3\nseed = {seed}\n\n\
         [data]\ntrain = \"train.jsonl\"\n{valid_line}sentiment = \"sentiment.tsv\"\n\
         emotion_words = \"emotion_words.tsv\"\nemotions = [{names}]\n\n\
         [eval]\nmax_len = 8\n",
        p = corpus.taxonomy.len(),
        names = names.join(", "),
    );
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, text).map_err(io(&cfg_path))?;
    Ok(SynthOutput { config: cfg_path, train, valid: valid_path, sentiment, emotion_words })
}
