//! SQuAD-style answer scoring: normalization, exact match and token F1.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;

static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").unwrap());

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no prediction for record {0}")]
    MissingPrediction(String),
}

/// Lowercase, strip Unicode punctuation, drop the articles a/an/the, and
/// collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped = PUNCT.replace_all(&lowered, "");
    stripped
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize(prediction) == normalize(gold)
}

pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize(prediction);
    let gold = normalize(gold);
    let pred_toks: Vec<&str> = pred.split_whitespace().collect();
    let gold_toks: Vec<&str> = gold.split_whitespace().collect();
    if pred_toks.is_empty() || gold_toks.is_empty() {
        return if pred_toks.len() == gold_toks.len() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_toks {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred_toks {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred_toks.len() as f64;
    let recall = common as f64 / gold_toks.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub em: bool,
    pub f1: f64,
}

impl PairScore {
    pub fn of(prediction: &str, gold: &str) -> Self {
        PairScore {
            em: exact_match(prediction, gold),
            f1: token_f1(prediction, gold),
        }
    }

    /// Best EM and best F1 over a set of golds, taken independently.
    pub fn best_over<'a>(prediction: &str, golds: impl IntoIterator<Item = &'a str>) -> Self {
        golds
            .into_iter()
            .map(|g| PairScore::of(prediction, g))
            .fold(PairScore { em: false, f1: 0.0 }, |acc, s| PairScore {
                em: acc.em || s.em,
                f1: acc.f1.max(s.f1),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent exact match.
    pub em: f64,
    /// Percent token F1.
    pub f1: f64,
    pub per_question: BTreeMap<String, PairScore>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EM {:.2} F1 {:.2} (n={})", self.em, self.f1, self.per_question.len())
    }
}

pub fn evaluate(predictions: &HashMap<String, String>, corpus: &Corpus) -> Result<EvalReport, MetricsError> {
    let mut per_question = BTreeMap::new();
    for record in &corpus.records {
        let prediction = predictions
            .get(&record.id)
            .ok_or_else(|| MetricsError::MissingPrediction(record.id.clone()))?;
        per_question.insert(
            record.id.clone(),
            PairScore::best_over(prediction, record.gold_texts()),
        );
    }
    let n = per_question.len().max(1) as f64;
    let em = per_question.values().filter(|s| s.em).count() as f64 / n * 100.0;
    let f1 = per_question.values().map(|s| s.f1).sum::<f64>() / n * 100.0;
    Ok(EvalReport { em, f1, per_question })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Answer, QaRecord, Split};

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The heart is normal."), "heart is normal");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("An  apple"), "apple");
        assert_eq!(normalize("  \u{201C}Left\u{201D}—lobe "), "leftlobe");
        // articles only vanish as whole tokens
        assert_eq!(normalize("theme anatomy"), "theme anatomy");
    }

    #[test]
    fn f1_examples() {
        let f = token_f1("small left pleural effusion", "left pleural effusion");
        assert!((f - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("x y", "z w"), 0.0);
        assert_eq!(token_f1("", "nodule"), 0.0);
        assert_eq!(token_f1("the", ""), 1.0);
        // multiset intersection, not set
        let f = token_f1("lobe lobe", "lobe");
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn em_examples() {
        assert!(exact_match("The heart is normal.", "heart is normal"));
        assert!(exact_match("", ""));
        assert!(!exact_match("left", "right"));
    }

    fn record(id: &str, context: &str, golds: &[&str]) -> QaRecord {
        let gold_answers: Vec<Answer> = golds
            .iter()
            .map(|g| Answer {
                text: g.to_string(),
                answer_start: context[..context.find(g).unwrap()].chars().count(),
            })
            .collect();
        QaRecord {
            id: id.into(),
            context: context.into(),
            question: "q".into(),
            is_answerable: !gold_answers.is_empty(),
            gold_answers,
        }
    }

    #[test]
    fn evaluate_max_over_golds_and_unanswerable() {
        let corpus = Corpus::new(
            vec![
                record("a", "nodule in left lobe", &["left lobe", "lobe"]),
                record("b", "nothing here", &[]),
            ],
            Split::Dev,
        )
        .unwrap();
        let preds: HashMap<String, String> =
            [("a".to_string(), "lobe".to_string()), ("b".to_string(), String::new())].into();
        let report = evaluate(&preds, &corpus).unwrap();
        assert_eq!(report.em, 100.0);
        assert_eq!(report.f1, 100.0);

        let missing: HashMap<String, String> = [("a".to_string(), "x".to_string())].into();
        assert!(matches!(evaluate(&missing, &corpus), Err(MetricsError::MissingPrediction(id)) if id == "b"));
    }
}
