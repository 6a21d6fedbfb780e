//! Preference pairs `(prompt, chosen, rejected)` and their JSONL form.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::io::{read_jsonl, write_jsonl, ArtifactError};
use crate::metrics::token_f1;

/// The corruption rules used to forge rejected answers from gold tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    RandomSpan,
    PartialOverlapLeft,
    PartialOverlapRight,
    LongerAnswer,
    PartialAnswer,
    OtherQuestionAnswer,
    NoAnswer,
}

impl Rule {
    pub const ALL: [Rule; 7] = [
        Rule::RandomSpan,
        Rule::PartialOverlapLeft,
        Rule::PartialOverlapRight,
        Rule::LongerAnswer,
        Rule::PartialAnswer,
        Rule::OtherQuestionAnswer,
        Rule::NoAnswer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::RandomSpan => "random_span",
            Rule::PartialOverlapLeft => "partial_overlap_left",
            Rule::PartialOverlapRight => "partial_overlap_right",
            Rule::LongerAnswer => "longer_answer",
            Rule::PartialAnswer => "partial_answer",
            Rule::OtherQuestionAnswer => "other_question_answer",
            Rule::NoAnswer => "no_answer",
        }
    }
}

/// Which generator produced a pair's rejected answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Rule(Rule),
    /// Model-forged; the tag names the run (e.g. the split half).
    Model(String),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Rule(r) => write!(f, "rule:{}", r.name()),
            Source::Model(run) => write!(f, "model:{run}"),
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(name) = s.strip_prefix("rule:") {
            Rule::ALL
                .into_iter()
                .find(|r| r.name() == name)
                .map(Source::Rule)
                .ok_or_else(|| format!("unknown rule {name:?}"))
        } else if let Some(run) = s.strip_prefix("model:") {
            if run.is_empty() {
                Err("empty model run id".into())
            } else {
                Ok(Source::Model(run.to_string()))
            }
        } else {
            Err(format!("source {s:?} must start with rule: or model:"))
        }
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    /// Id of the corpus record the pair was forged from.
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub source: Source,
    pub f1_rejected_vs_gold: f64,
}

impl PreferencePair {
    pub fn new(id: &str, prompt: &str, chosen: &str, rejected: &str, source: Source) -> Self {
        PreferencePair {
            id: id.to_string(),
            prompt: prompt.to_string(),
            chosen: chosen.to_string(),
            rejected: rejected.to_string(),
            source,
            f1_rejected_vs_gold: token_f1(rejected, chosen),
        }
    }
}

/// Drop later pairs repeating an earlier `(prompt, rejected)`.
pub fn dedup_pairs(pairs: Vec<PreferencePair>) -> Vec<PreferencePair> {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| seen.insert((p.prompt.clone(), p.rejected.clone())))
        .collect()
}

/// Canonical artifact order: by id, then rejected text.
pub fn sort_pairs(pairs: &mut [PreferencePair]) {
    pairs.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.rejected.cmp(&b.rejected)));
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<(), ArtifactError> {
    write_jsonl(path, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>, ArtifactError> {
    read_jsonl(path)
}
