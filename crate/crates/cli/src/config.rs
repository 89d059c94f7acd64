//! The TOML run configuration.

use std::path::{Path, PathBuf};

use ecore::corpus::{EmotionWordLexicon, SentimentLexicon, Taxonomy};
use ecore::model::ModelConfig;
use ecore::training::TrainConfig;
use ecore::Error;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<DataConfig>,
    pub eval: EvalConfig,
}

/// Input files and the checkpoint directory. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// `word<TAB>η` file; the bundled lexicon when absent.
    pub sentiment: Option<PathBuf>,
    /// `emotion<TAB>word,...` file; the bundled table when absent.
    pub emotion_words: Option<PathBuf>,
    /// `word v1 ... vD` text vectors copied into the word table.
    pub embeddings: Option<PathBuf>,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Emotion names in id order. Defaults to the first `model.emotions` built-in names.
    pub emotions: Option<Vec<String>>,
}

fn default_checkpoint_dir() -> PathBuf {
    PathBuf::from("checkpoints")
}

fn default_min_count() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Longest generated response.
    pub max_len: usize,
    pub recall_k: Vec<usize>,
    /// Average Dist-n per response instead of over the corpus.
    pub per_response_dist: bool,
    /// Related words needed before a secondary emotion counts as present.
    pub secondary_min_words: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_len: 30, recall_k: vec![1, 3, 5], per_response_dist: false, secondary_min_words: 1 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(data) = &mut cfg.data {
            data.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks and input-file existence.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.recall_k.contains(&0) {
            return Err(Error::Config("eval.recall_k entries must be positive".into()).into());
        }
        if let Some(data) = &self.data {
            if let Some(names) = &data.emotions {
                if names.len() != self.model.emotions {
                    return Err(Error::Config(format!(
                        "data.emotions lists {} names but model.emotions is {}",
                        names.len(),
                        self.model.emotions
                    ))
                    .into());
                }
            }
            for p in data.inputs() {
                if !p.is_file() {
                    return Err(Error::Config(format!("file not found: {}", p.display())).into());
                }
            }
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataConfig, CliError> {
        self.data.as_ref().ok_or_else(|| CliError::Usage("configuration has no [data] table".into()))
    }

    pub fn taxonomy(&self) -> Taxonomy {
        match self.data.as_ref().and_then(|d| d.emotions.clone()) {
            Some(names) => Taxonomy::new(names.iter().map(|n| n.trim().to_lowercase()).collect()),
            None => Taxonomy::first(self.model.emotions),
        }
    }

    pub fn sentiment(&self) -> Result<SentimentLexicon, CliError> {
        Ok(match self.data.as_ref().and_then(|d| d.sentiment.as_deref()) {
            Some(p) => SentimentLexicon::load(p)?,
            None => SentimentLexicon::bundled(),
        })
    }

    pub fn emotion_words(&self) -> Result<EmotionWordLexicon, CliError> {
        let taxonomy = self.taxonomy();
        Ok(match self.data.as_ref().and_then(|d| d.emotion_words.as_deref()) {
            Some(p) => EmotionWordLexicon::load(p, &taxonomy)?,
            None => EmotionWordLexicon::bundled(&taxonomy)?,
        })
    }
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.train);
        join(&mut self.checkpoint_dir);
        for p in [&mut self.valid, &mut self.test, &mut self.sentiment, &mut self.emotion_words, &mut self.embeddings]
            .into_iter()
            .flatten()
        {
            join(p);
        }
    }

    /// Files that must exist before any work starts.
    fn inputs(&self) -> impl Iterator<Item = &Path> {
        std::iter::once(self.train.as_path()).chain(
            [&self.valid, &self.test, &self.sentiment, &self.emotion_words, &self.embeddings]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert!(cfg.data.is_none());
        assert_eq!(cfg.eval.recall_k, [1, 3, 5]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nd_modle = 8\n").is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let mut d: DataConfig = toml::from_str("train = \"a.jsonl\"\ntest = \"/abs/t.jsonl\"").unwrap();
        d.resolve(Path::new("/cfg"));
        assert_eq!(d.train, Path::new("/cfg/a.jsonl"));
        assert_eq!(d.test.as_deref(), Some(Path::new("/abs/t.jsonl")));
        assert_eq!(d.checkpoint_dir, Path::new("/cfg/checkpoints"));
    }

    #[test]
    fn mismatched_emotion_list_is_a_config_error() {
        let mut cfg: RunConfig = toml::from_str("[model]\nemotions = 4\nd_model = 8\nheads = 2\nthresholds = [0.0, 0.1]").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("t.jsonl");
        std::fs::write(&train, "").unwrap();
        cfg.data = Some(DataConfig {
            train,
            valid: None,
            test: None,
            sentiment: None,
            emotion_words: None,
            embeddings: None,
            checkpoint_dir: dir.path().into(),
            min_count: 1,
            emotions: Some(vec!["sad".into()]),
        });
        assert!(cfg.validate().is_err());
    }
}
