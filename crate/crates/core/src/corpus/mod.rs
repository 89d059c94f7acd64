//! Dialogue loading, tokenization, lexicons and synthetic corpora.

mod lexicon;
mod synth;
mod text;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use lexicon::{intensity, EmotionWordLexicon, SentimentLexicon, Taxonomy, DEFAULT_EMOTIONS};
pub use synth::{synth_corpus, SynthConfig, SyntheticCorpus};
pub use text::{tokenize, Vocabulary, BOS, BOS_ID, CLS, CLS_ID, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Speaker,
    Listener,
}

impl Speaker {
    /// Dialog-state id; 0 is reserved for `[CLS]`.
    pub fn state_id(self) -> usize {
        match self {
            Speaker::Speaker => 1,
            Speaker::Listener => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSample {
    pub context: Vec<Utterance>,
    pub response: String,
    pub emotion: usize,
    /// Multi-label annotation, always containing `emotion` when present.
    pub gold_emotions: Option<BTreeSet<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DialogueRecord {
    context: Vec<Utterance>,
    response: String,
    emotion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emotions: Option<Vec<String>>,
}

/// Parsed samples plus the per-line problems that did not abort loading.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<DialogueSample>,
    /// `(line number, message)` for lines that could not be parsed.
    pub malformed: Vec<(usize, String)>,
    /// `(line number, message)` for accepted lines with irregularities.
    pub warnings: Vec<(usize, String)>,
}

/// Reads a JSON-Lines dialogue file. Unknown emotion names abort loading.
pub fn load_dialogues(path: &Path, taxonomy: &Taxonomy) -> Result<LoadReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dialogues(&text, taxonomy)
}

pub fn parse_dialogues(text: &str, taxonomy: &Taxonomy) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.malformed.push((lineno, e.to_string()));
                continue;
            }
        };
        if record.context.is_empty() {
            report.malformed.push((lineno, "empty context".into()));
            continue;
        }
        if record.context.iter().any(|u| u.text.trim().is_empty()) {
            report.malformed.push((lineno, "empty utterance text".into()));
            continue;
        }
        let emotion = taxonomy.id(&record.emotion).ok_or_else(|| Error::UnknownEmotion(record.emotion.clone()))?;
        let gold_emotions = match record.emotions {
            None => None,
            Some(names) => {
                let mut set = BTreeSet::new();
                for name in &names {
                    set.insert(taxonomy.id(name).ok_or_else(|| Error::UnknownEmotion(name.clone()))?);
                }
                if set.insert(emotion) {
                    report.warnings.push((lineno, "main emotion missing from emotions; added".into()));
                }
                Some(set)
            }
        };
        let alternates = record.context.iter().enumerate().all(|(i, u)| {
            u.speaker == if i % 2 == 0 { Speaker::Speaker } else { Speaker::Listener }
        });
        if !alternates {
            report.warnings.push((lineno, "context roles do not alternate from speaker".into()));
        }
        report.samples.push(DialogueSample { context: record.context, response: record.response, emotion, gold_emotions });
    }
    for (line, msg) in &report.malformed {
        log::warn!("line {line}: {msg}");
    }
    for (line, msg) in &report.warnings {
        log::warn!("line {line}: {msg}");
    }
    Ok(report)
}

/// Writes samples in the JSON-Lines dialogue format.
pub fn write_dialogues<W: Write>(out: &mut W, samples: &[DialogueSample], taxonomy: &Taxonomy) -> std::io::Result<()> {
    for s in samples {
        let record = DialogueRecord {
            context: s.context.clone(),
            response: s.response.clone(),
            emotion: taxonomy.name(s.emotion).to_string(),
            emotions: s.gold_emotions.as_ref().map(|g| g.iter().map(|&e| taxonomy.name(e).to_string()).collect()),
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Model-ready view of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedInstance {
    /// `[CLS]` followed by the context tokens.
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub states: Vec<usize>,
    /// Intensity of each context token (excludes `[CLS]`).
    pub intensity: Vec<f64>,
    /// `[BOS] … [EOS]`.
    pub response: Vec<usize>,
    pub emotion: usize,
    pub gold_emotions: Option<BTreeSet<usize>>,
}

impl TokenizedInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize_instance(sample: &DialogueSample, vocab: &Vocabulary, lexicon: &SentimentLexicon) -> TokenizedInstance {
    let mut tokens = vec![CLS_ID];
    let mut states = vec![0];
    let mut words = Vec::new();
    for utt in &sample.context {
        for w in tokenize(&utt.text) {
            tokens.push(vocab.id(&w));
            states.push(utt.speaker.state_id());
            words.push(w);
        }
    }
    let mut response = vec![BOS_ID];
    response.extend(vocab.encode(&sample.response));
    response.push(EOS_ID);
    TokenizedInstance {
        positions: (0..tokens.len()).collect(),
        intensity: intensity(&words, lexicon),
        tokens,
        states,
        response,
        emotion: sample.emotion,
        gold_emotions: sample.gold_emotions.clone(),
    }
}

/// All context and response texts of `samples`, for vocabulary building.
pub fn texts(samples: &[DialogueSample]) -> impl Iterator<Item = &str> {
    samples
        .iter()
        .flat_map(|s| s.context.iter().map(|u| u.text.as_str()).chain(std::iter::once(s.response.as_str())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ctx: &[(Speaker, &str)]) -> DialogueSample {
        DialogueSample {
            context: ctx.iter().map(|(s, t)| Utterance { speaker: *s, text: t.to_string() }).collect(),
            response: "ok".into(),
            emotion: 0,
            gold_emotions: None,
        }
    }

    #[test]
    fn tokenizes_single_utterance() {
        let s = sample(&[(Speaker::Speaker, "I am sad")]);
        let vocab = Vocabulary::build(texts(std::slice::from_ref(&s)), 1);
        let inst = tokenize_instance(&s, &vocab, &SentimentLexicon::bundled());
        let words: Vec<&str> = inst.tokens.iter().map(|&t| vocab.token(t)).collect();
        assert_eq!(words, [CLS, "i", "am", "sad"]);
        assert_eq!(inst.states, [0, 1, 1, 1]);
        assert_eq!(inst.positions, [0, 1, 2, 3]);
        assert_eq!(inst.intensity.len(), 3);
        assert!(inst.intensity[2] > 0.0);
        assert_eq!(inst.response.first(), Some(&BOS_ID));
        assert_eq!(inst.response.last(), Some(&EOS_ID));
    }

    #[test]
    fn state_ids_follow_roles() {
        let s = sample(&[(Speaker::Speaker, "hi there"), (Speaker::Listener, "hello you")]);
        let inst = tokenize_instance(&s, &Vocabulary::default(), &SentimentLexicon::default());
        assert_eq!(inst.states, [0, 1, 1, 2, 2]);
        assert!(inst.tokens[1..].iter().all(|&t| t == UNK_ID));
    }

    #[test]
    fn tokenization_is_deterministic() {
        let s = sample(&[(Speaker::Speaker, "Wow, that's great!")]);
        let vocab = Vocabulary::build(texts(std::slice::from_ref(&s)), 1);
        let lex = SentimentLexicon::bundled();
        assert_eq!(tokenize_instance(&s, &vocab, &lex), tokenize_instance(&s, &vocab, &lex));
    }

    #[test]
    fn parses_records_and_collects_errors() {
        let tax = Taxonomy::default();
        let text = concat!(
            r#"{"context":[{"speaker":"speaker","text":"I heard a noise"}],"response":"oh no","emotion":"afraid"}"#,
            "\n",
            "not json\n",
            r#"{"context":[{"speaker":"listener","text":"x"}],"response":"y","emotion":"sad","emotions":["lonely"]}"#,
            "\n"
        );
        let rep = parse_dialogues(text, &tax).unwrap();
        assert_eq!(rep.samples.len(), 2);
        assert_eq!(rep.samples[0].emotion, tax.id("afraid").unwrap());
        assert_eq!(rep.malformed.len(), 1);
        assert_eq!(rep.malformed[0].0, 2);
        let gold = rep.samples[1].gold_emotions.as_ref().unwrap();
        assert!(gold.contains(&tax.id("sad").unwrap()) && gold.contains(&tax.id("lonely").unwrap()));
        assert_eq!(rep.warnings.len(), 2);
    }

    #[test]
    fn unknown_emotion_is_fatal() {
        let text = r#"{"context":[{"speaker":"speaker","text":"x"}],"response":"y","emotion":"bored"}"#;
        match parse_dialogues(text, &Taxonomy::default()) {
            Err(Error::UnknownEmotion(name)) => assert_eq!(name, "bored"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_yields_nothing() {
        let rep = parse_dialogues("", &Taxonomy::default()).unwrap();
        assert!(rep.samples.is_empty() && rep.malformed.is_empty());
    }

    #[test]
    fn write_then_parse_round_trips() {
        let tax = Taxonomy::default();
        let mut s = sample(&[(Speaker::Speaker, "I am sad"), (Speaker::Listener, "why?")]);
        s.gold_emotions = Some([0, 5].into_iter().collect());
        let mut buf = Vec::new();
        write_dialogues(&mut buf, std::slice::from_ref(&s), &tax).unwrap();
        let rep = parse_dialogues(std::str::from_utf8(&buf).unwrap(), &tax).unwrap();
        assert_eq!(rep.samples, vec![s]);
    }
}
