use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecore::corpus::{EmotionWordLexicon, SynthConfig, Taxonomy};
use ecore::decoder::Strategy;
use ecore::training::toy_model_config;
use ecore::Error;
use ecore_cli::commands::{self, CorrelationSource, GRADCHECK_EPSILON};
use ecore_cli::{CliError, Result, RunConfig};
use serde::Serialize;

/// Emotion-correlation graph models for empathetic dialogue.
///
/// Log verbosity comes from ECORE_LOG (default "info").
#[derive(Parser)]
#[command(name = "ecore", version)]
struct Cli {
    /// Worker threads for evaluation and generation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.strategy.
    #[arg(long)]
    strategy: Option<Strategy>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(s) = self.strategy {
            cfg.train.strategy = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, checkpointing and validating after every epoch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this checkpoint.
        #[arg(long, alias = "resume")]
        checkpoint: Option<PathBuf>,
        /// Checkpoint directory (overrides data.checkpoint_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a metrics report as JSON.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dialogue file (defaults to data.test, then data.valid).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate responses for a JSON Lines file of contexts.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss under both strategies.
    Gradcheck {
        /// Model section to check (defaults to the built-in toy model).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = GRADCHECK_EPSILON)]
        epsilon: f64,
    },
    /// Secondary-emotion statistics of a dialogue file.
    Stats {
        #[arg(long)]
        input: PathBuf,
        /// Takes the taxonomy and emotion-word lexicon from this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Emotion-word table (overrides the configuration).
        #[arg(long)]
        emotion_words: Option<PathBuf>,
        #[arg(long)]
        min_words: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the emotion correlation graph as JSON and DOT.
    ExportCorr {
        #[command(flatten)]
        source: CorrSource,
        /// Number of emotions in dataset mode (the first N built-in names).
        #[arg(long)]
        emotions: Option<usize>,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "correlation")]
        stem: String,
    },
    /// Write a synthetic planted-pair corpus with lexicons and a config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Extra samples written to valid.jsonl.
        #[arg(long, default_value_t = 0)]
        valid: usize,
        #[arg(long, default_value_t = 8)]
        emotions: usize,
        #[arg(long, default_value_t = 0.8)]
        co_prob: f64,
        /// Planted pair as `a,b`; repeatable. Defaults to 0,1 and 2,3.
        #[arg(long = "pair", value_parser = parse_pair)]
        pairs: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct CorrSource {
    /// Use the learned correlation matrix of this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use gold co-occurrence counts of this dialogue file.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected a,b")?;
    let n = |x: &str| x.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((n(a)?, n(b)?))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|source| Error::Io { path: p.into(), source })?,
        None => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    return Err(Error::Io { path: "<stdout>".into(), source: e }.into())
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Train { run, checkpoint, out } => {
            let cfg = run.load()?;
            let outcome = commands::train(&cfg, checkpoint.as_deref(), out.as_deref())?;
            if let Some(last) = outcome.steps.last() {
                log::info!("finished at step {}; last checkpoint {}", last.step, outcome.checkpoint.display());
            }
        }
        Command::Eval { run, checkpoint, input, out } => {
            let cfg = run.load()?;
            let report = commands::eval(&cfg, &checkpoint, input.as_deref(), cfg.train.strategy)?;
            emit(&report, out.as_deref())?;
        }
        Command::Generate { run, checkpoint, input, out } => {
            let cfg = run.load()?;
            match &out {
                Some(p) => {
                    let mut f = std::fs::File::create(p).map_err(|source| Error::Io { path: p.clone(), source })?;
                    commands::generate(&cfg, &checkpoint, &input, cfg.train.strategy, &mut f)?;
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    commands::generate(&cfg, &checkpoint, &input, cfg.train.strategy, &mut stdout)?;
                    stdout.flush().ok();
                }
            }
        }
        Command::Gradcheck { config, seed, epsilon } => {
            let (model, cfg_seed) = match &config {
                Some(p) => {
                    let cfg = RunConfig::load(p)?;
                    (cfg.model, cfg.train.seed)
                }
                None => (toy_model_config(), 0),
            };
            let summary = commands::gradcheck(&model, seed.unwrap_or(cfg_seed), epsilon)?;
            emit(&summary, None)?;
            if !summary.passed {
                return Err(CliError::GradCheck(format!(
                    "max relative error soft {:.3e}, hard {:.3e} (tolerance {:.0e})",
                    summary.soft.max_rel_error, summary.hard.max_rel_error, summary.tolerance
                )));
            }
        }
        Command::Stats { input, config, emotion_words, min_words, out } => {
            let cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let taxonomy = if config.is_some() { cfg.taxonomy() } else { Taxonomy::default() };
            let lexicon = match &emotion_words {
                Some(p) => EmotionWordLexicon::load(p, &taxonomy)?,
                None if config.is_some() => cfg.emotion_words()?,
                None => EmotionWordLexicon::bundled(&taxonomy)?,
            };
            let min = min_words.unwrap_or(cfg.eval.secondary_min_words);
            emit(&commands::stats(&input, &taxonomy, &lexicon, min)?, out.as_deref())?;
        }
        Command::ExportCorr { source, emotions, threshold, out, stem } => {
            let taxonomy = emotions.map_or_else(Taxonomy::default, Taxonomy::first);
            let src = match (&source.checkpoint, &source.dataset) {
                (Some(c), _) => CorrelationSource::Checkpoint(c),
                (None, Some(d)) => CorrelationSource::Dataset(d, taxonomy),
                (None, None) => unreachable!("clap enforces one source"),
            };
            let export = commands::export_corr(src, threshold, &out, &stem)?;
            emit(&export.edges, None)?;
        }
        Command::Synth { out, samples, valid, emotions, co_prob, pairs, seed } => {
            let mut config = SynthConfig { emotions, samples, co_prob, ..SynthConfig::default() };
            if !pairs.is_empty() {
                config.planted_pairs = pairs;
            }
            emit(&commands::synth(&config, valid, seed, &out)?, None)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ECORE_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
