//! SQuAD v2 corpus ingestion, validation and prompt rendering.
//!
//! Records are validated on load: every gold answer must be the context
//! substring at its character offset, ids must be unique, and a record is
//! answerable exactly when it carries at least one gold answer.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::char_to_byte;

/// Literal separator between the context and question parts of a prompt.
pub const SEP: &str = " <SEP> ";
const CONTEXT_PREFIX: &str = "context: ";
const QUESTION_PREFIX: &str = "question: ";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed SQuAD json: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("record {id}: answer {text:?} does not match context at character offset {answer_start}")]
    OffsetMismatch {
        id: String,
        text: String,
        answer_start: usize,
    },
    #[error("record {id}: empty answer text on an answerable question")]
    EmptyAnswer { id: String },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("record {0}: context or question contains the reserved separator <SEP>")]
    ReservedSeparator(String),
    #[error("need at least 2 distinct contexts to split, found {0}")]
    TooFewContexts(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// Character (not byte) offset into the context.
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaRecord {
    pub id: String,
    pub context: String,
    pub question: String,
    pub gold_answers: Vec<Answer>,
    pub is_answerable: bool,
}

impl QaRecord {
    /// The canonical preferred answer: the first gold, or "" when unanswerable.
    pub fn chosen(&self) -> &str {
        self.gold_answers.first().map_or("", |a| a.text.as_str())
    }

    /// Gold texts used for scoring; `[""]` for unanswerable records.
    pub fn gold_texts(&self) -> Vec<&str> {
        if self.gold_answers.is_empty() {
            vec![""]
        } else {
            self.gold_answers.iter().map(|a| a.text.as_str()).collect()
        }
    }

    /// Byte range of a gold answer inside the context.
    pub fn answer_bytes(&self, answer: &Answer) -> Option<Range<usize>> {
        let start = char_to_byte(&self.context, answer.answer_start)?;
        let end = start + answer.text.len();
        (self.context.get(start..end) == Some(answer.text.as_str())).then_some(start..end)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.context.contains(SEP.trim()) || self.question.contains(SEP.trim()) {
            return Err(CorpusError::ReservedSeparator(self.id.clone()));
        }
        for answer in &self.gold_answers {
            if answer.text.is_empty() {
                return Err(CorpusError::EmptyAnswer {
                    id: self.id.clone(),
                });
            }
            if self.answer_bytes(answer).is_none() {
                return Err(CorpusError::OffsetMismatch {
                    id: self.id.clone(),
                    text: answer.text.clone(),
                    answer_start: answer.answer_start,
                });
            }
        }
        debug_assert_eq!(self.is_answerable, !self.gold_answers.is_empty());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub records: Vec<QaRecord>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt(String);

impl Prompt {
    pub fn new(context: &str, question: &str) -> Self {
        Prompt(format!("{CONTEXT_PREFIX}{context}{SEP}{QUESTION_PREFIX}{question}"))
    }

    pub fn from_text(text: impl Into<String>) -> Self {
        Prompt(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    /// Recover `(context, question)` from a prompt rendered by [`render_prompt`].
    pub fn parts(&self) -> Option<(&str, &str)> {
        let body = self.0.strip_prefix(CONTEXT_PREFIX)?;
        let marker = format!("{SEP}{QUESTION_PREFIX}");
        let at = body.find(&marker)?;
        Some((&body[..at], &body[at + marker.len()..]))
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn render_prompt(record: &QaRecord) -> Prompt {
    Prompt::new(&record.context, &record.question)
}

// SQuAD v2 wire format.

#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    data: Vec<SquadArticle>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadArticle {
    #[serde(default)]
    title: String,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<Answer>,
    #[serde(default)]
    is_impossible: bool,
}

impl Corpus {
    pub fn new(records: Vec<QaRecord>, split: Split) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
            r.validate()?;
        }
        Ok(Corpus { records, split })
    }

    pub fn from_squad_json(json: &str) -> Result<Self, CorpusError> {
        let file: SquadFile = serde_json::from_str(json)?;
        let mut records = Vec::new();
        for article in file.data {
            for paragraph in article.paragraphs {
                for qa in paragraph.qas {
                    let gold_answers = if qa.is_impossible { Vec::new() } else { qa.answers };
                    records.push(QaRecord {
                        id: qa.id,
                        context: paragraph.context.clone(),
                        question: qa.question,
                        is_answerable: !gold_answers.is_empty(),
                        gold_answers,
                    });
                }
            }
        }
        Corpus::new(records, file.split.unwrap_or_default())
    }

    /// Canonical SQuAD v2 serialization: records sorted by id, consecutive
    /// records sharing a context grouped into one paragraph.
    pub fn to_squad_json(&self) -> String {
        let mut order: Vec<&QaRecord> = self.records.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        let mut paragraphs: Vec<SquadParagraph> = Vec::new();
        for r in order {
            let qa = SquadQa {
                id: r.id.clone(),
                question: r.question.clone(),
                answers: r.gold_answers.clone(),
                is_impossible: !r.is_answerable,
            };
            match paragraphs.last_mut() {
                Some(p) if p.context == r.context => p.qas.push(qa),
                _ => paragraphs.push(SquadParagraph {
                    context: r.context.clone(),
                    qas: vec![qa],
                }),
            }
        }
        let file = SquadFile {
            version: Some("v2.0".into()),
            split: Some(self.split),
            data: vec![SquadArticle {
                title: self.split.to_string(),
                paragraphs,
            }],
        };
        serde_json::to_string_pretty(&file).expect("corpus serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_squad_json()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QaRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Record indices grouped by shared context, groups in first-appearance order.
    pub fn context_groups(&self) -> Vec<Vec<usize>> {
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let g = *slot.entry(r.context.as_str()).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        groups
    }

    /// Other records sharing each record's context, indexed like `records`.
    pub fn siblings(&self) -> Vec<Vec<&QaRecord>> {
        let mut out = vec![Vec::new(); self.records.len()];
        for group in self.context_groups() {
            for &i in &group {
                out[i] = group
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| &self.records[j])
                    .collect();
            }
        }
        out
    }

    pub fn unanswerable_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let n = self.records.iter().filter(|r| !r.is_answerable).count();
        n as f64 / self.records.len() as f64
    }

    fn subset(&self, mut indices: Vec<usize>) -> Corpus {
        indices.sort_unstable();
        Corpus {
            records: indices.into_iter().map(|i| self.records[i].clone()).collect(),
            split: self.split,
        }
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let json = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::from_squad_json(&json)
}

/// Partition a corpus into two halves by context with a seeded shuffle.
///
/// All questions about one context land in the same half; half A receives
/// `ceil(n/2)` contexts. Records keep their original relative order.
pub fn split_contexts(corpus: &Corpus, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    let mut groups = corpus.context_groups();
    if groups.len() < 2 {
        return Err(CorpusError::TooFewContexts(groups.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let cut = groups.len().div_ceil(2);
    let a = groups[..cut].iter().flatten().copied().collect();
    let b = groups[cut..].iter().flatten().copied().collect();
    Ok((corpus.subset(a), corpus.subset(b)))
}
