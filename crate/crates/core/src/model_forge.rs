//! Model-based negatives from the split-half self-prediction protocol.
//!
//! A policy trained on one half of the contexts predicts answers for the
//! whole corpus, including the questions it was trained on; the same is done
//! with the other half. Wrong predictions become rejected answers.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, split_contexts, Corpus, CorpusError};
use crate::hashing::sub_seed;
use crate::io::{read_jsonl, write_jsonl, ArtifactError};
use crate::metrics::exact_match;
use crate::pairs::{dedup_pairs, sort_pairs, PreferencePair, Source};
use crate::policy::{predict_corpus, sft_train, PolicyError, SftConfig};

#[derive(Debug, thiserror::Error)]
pub enum ModelForgeError {
    #[error("split failed: {0}")]
    Split(#[from] CorpusError),
    #[error("training half {half} failed: {source}")]
    Training { half: Half, source: PolicyError },
    #[error("prediction for unknown record {0}")]
    UnknownId(String),
    #[error("F1 threshold {0} outside (0, 1]")]
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Half {
    A,
    B,
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Half::A => "A",
            Half::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
    #[serde(rename = "half")]
    pub half_trained_on: Half,
    #[serde(rename = "in_train")]
    pub was_in_training_half: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub f1_threshold: f64,
}

impl FilterConfig {
    pub fn new(f1_threshold: f64) -> Result<Self, ModelForgeError> {
        if f1_threshold > 0.0 && f1_threshold <= 1.0 {
            Ok(FilterConfig { f1_threshold })
        } else {
            Err(ModelForgeError::Threshold(f1_threshold))
        }
    }
}

/// Train one policy per context half and let each predict the full corpus.
///
/// Early stopping uses `dev` when given; otherwise each half is selected on
/// the opposite half. Output is sorted by (id, half).
pub fn split_half_predict(
    corpus: &Corpus,
    dev: Option<&Corpus>,
    config: &SftConfig,
    seed: u64,
) -> Result<Vec<PredictionRecord>, ModelForgeError> {
    let (half_a, half_b) = split_contexts(corpus, sub_seed(seed, "split"))?;
    let train_half = |half: Half, train: &Corpus, other: &Corpus| {
        let selection = dev.unwrap_or(other);
        sft_train(train, selection, config, sub_seed(seed, &format!("half-{half}")))
            .map_err(|source| ModelForgeError::Training { half, source })
    };
    let (a, b) = rayon::join(
        || train_half(Half::A, &half_a, &half_b),
        || train_half(Half::B, &half_b, &half_a),
    );
    let (a, b) = (a?, b?);

    let in_a: std::collections::HashSet<&str> = half_a.records.iter().map(|r| r.id.as_str()).collect();
    let mut out = Vec::with_capacity(2 * corpus.len());
    for (half, outcome) in [(Half::A, &a), (Half::B, &b)] {
        for (id, prediction) in predict_corpus(&outcome.params, corpus) {
            let was_in_training_half = in_a.contains(id.as_str()) == (half == Half::A);
            out.push(PredictionRecord {
                id,
                prediction,
                half_trained_on: half,
                was_in_training_half,
            });
        }
    }
    out.sort_by(|x, y| x.id.cmp(&y.id).then(x.half_trained_on.cmp(&y.half_trained_on)));
    Ok(out)
}

/// One pair per prediction that matches none of the golds.
pub fn collect_incorrect(predictions: &[PredictionRecord], corpus: &Corpus) -> Result<Vec<PreferencePair>, ModelForgeError> {
    let index = corpus.index_by_id();
    let mut pairs = Vec::new();
    for p in predictions {
        let &i = index
            .get(p.id.as_str())
            .ok_or_else(|| ModelForgeError::UnknownId(p.id.clone()))?;
        let record = &corpus.records[i];
        if record.gold_texts().iter().any(|g| exact_match(&p.prediction, g)) {
            continue;
        }
        pairs.push(PreferencePair::new(
            &record.id,
            render_prompt(record).as_str(),
            record.chosen(),
            &p.prediction,
            Source::Model(p.half_trained_on.to_string()),
        ));
    }
    let mut pairs = dedup_pairs(pairs);
    sort_pairs(&mut pairs);
    Ok(pairs)
}

/// Keep pairs whose rejected answer scores below the F1 threshold against the gold.
pub fn filter_by_f1(pairs: &[PreferencePair], config: FilterConfig) -> Vec<PreferencePair> {
    pairs
        .iter()
        .filter(|p| p.f1_rejected_vs_gold < config.f1_threshold)
        .cloned()
        .collect()
}

pub fn write_predictions(path: &Path, predictions: &[PredictionRecord]) -> Result<(), ArtifactError> {
    write_jsonl(path, predictions)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, ArtifactError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Answer, QaRecord, Split};

    fn corpus() -> Corpus {
        let ctx = "there is a nodule in the left upper lobe today";
        let mk = |id: &str, gold: Option<&str>| {
            let gold_answers: Vec<Answer> = gold
                .map(|g| {
                    vec![Answer {
                        text: g.into(),
                        answer_start: ctx.find(g).unwrap(),
                    }]
                })
                .unwrap_or_default();
            QaRecord {
                id: id.into(),
                context: ctx.into(),
                question: format!("{id}?"),
                is_answerable: !gold_answers.is_empty(),
                gold_answers,
            }
        };
        Corpus::new(vec![mk("q1", Some("left upper lobe")), mk("q2", None)], Split::Train).unwrap()
    }

    fn pred(id: &str, prediction: &str, half: Half) -> PredictionRecord {
        PredictionRecord {
            id: id.into(),
            prediction: prediction.into(),
            half_trained_on: half,
            was_in_training_half: half == Half::A,
        }
    }

    #[test]
    fn correct_predictions_emit_nothing() {
        let c = corpus();
        let preds = [pred("q1", "left upper lobe", Half::A), pred("q1", "The left upper lobe.", Half::B), pred("q2", "", Half::A)];
        assert!(collect_incorrect(&preds, &c).unwrap().is_empty());
    }

    #[test]
    fn wrong_prediction_pair_and_dedup() {
        let c = corpus();
        let preds = [pred("q1", "left lobe", Half::A), pred("q1", "left lobe", Half::B), pred("q2", "nodule", Half::B)];
        let pairs = collect_incorrect(&preds, &c).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].chosen, "left upper lobe");
        assert_eq!(pairs[0].rejected, "left lobe");
        assert_eq!(pairs[0].source, Source::Model("A".into()));
        assert!((pairs[0].f1_rejected_vs_gold - 0.8).abs() < 1e-12);
        assert_eq!(pairs[1].chosen, "");
        assert_eq!(pairs[1].f1_rejected_vs_gold, 0.0);
        assert!(matches!(
            collect_incorrect(&[pred("zz", "x", Half::A)], &c),
            Err(ModelForgeError::UnknownId(_))
        ));
    }

    #[test]
    fn threshold_filter() {
        let c = corpus();
        let pairs = collect_incorrect(&[pred("q1", "left lobe", Half::A), pred("q1", "", Half::B)], &c).unwrap();
        let keep = |t| filter_by_f1(&pairs, FilterConfig::new(t).unwrap());
        assert_eq!(keep(0.9).len(), 2);
        assert_eq!(keep(0.7).len(), 1);
        assert_eq!(keep(0.5)[0].rejected, "");
        assert!(FilterConfig::new(0.0).is_err());
        assert!(FilterConfig::new(1.5).is_err());
        assert!(FilterConfig::new(1.0).is_ok());
    }

    #[test]
    fn prediction_jsonl_field_names() {
        let json = serde_json::to_string(&pred("q1", "x", Half::B)).unwrap();
        assert_eq!(json, r#"{"id":"q1","prediction":"x","half":"B","in_train":false}"#);
    }
}
