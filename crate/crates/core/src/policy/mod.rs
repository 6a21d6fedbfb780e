//! The answer policy: an exact log-linear softmax over enumerated answer
//! spans of the context plus a no-answer candidate.
//!
//! `log pi(y|x) = s(y) - log sum_y' exp s(y')` with `s(y) = w . phi(x, y)`.
//! Everything downstream (SFT, DPO, the forging protocol) goes through the
//! [`AnswerPolicy`] trait, so a different model could sit behind it.

mod example;
mod optim;
mod params;
mod sft;

use std::collections::HashMap;

use rayon::prelude::*;

pub use example::{log_softmax, log_sum_exp, slot, Example, FeatureSpec, FeatureVector, FEATURE_SCHEMA_VERSION};
pub use optim::{AdamConfig, AdamW};
pub use params::{ParamsMeta, PolicyParams};
pub use sft::{sft_loss_and_grad, sft_train, EarlyStopping, EpochLog, SftConfig, SftOutcome};

use crate::corpus::{Corpus, Prompt};
use crate::io::ArtifactError;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("prompt does not follow the `context: ... <SEP> question: ...` template")]
    MalformedPrompt,
    #[error("candidate {0:?} is not in the prompt's candidate set")]
    CandidateNotFound(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("empty {0} corpus")]
    EmptyCorpus(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// The seam between training procedures and the model behind them.
pub trait AnswerPolicy {
    fn log_prob(&self, prompt: &Prompt, candidate: &str) -> Result<f64, PolicyError>;
    fn predict(&self, prompt: &Prompt) -> Result<String, PolicyError>;
}

impl AnswerPolicy for PolicyParams {
    fn log_prob(&self, prompt: &Prompt, candidate: &str) -> Result<f64, PolicyError> {
        log_prob(self, prompt, candidate)
    }

    fn predict(&self, prompt: &Prompt) -> Result<String, PolicyError> {
        predict(self, prompt)
    }
}

pub fn featurize(spec: FeatureSpec, prompt: &Prompt, candidate: &str) -> Result<FeatureVector, PolicyError> {
    let ex = Example::from_prompt(prompt, spec, &[])?;
    let i = ex.index_of(candidate)?;
    Ok(ex.features(i))
}

pub fn log_prob(params: &PolicyParams, prompt: &Prompt, candidate: &str) -> Result<f64, PolicyError> {
    let ex = Example::from_prompt(prompt, params.spec(), &[])?;
    let i = ex.index_of(candidate)?;
    Ok(ex.log_probs(&params.weights)[i])
}

pub fn predict(params: &PolicyParams, prompt: &Prompt) -> Result<String, PolicyError> {
    let ex = Example::from_prompt(prompt, params.spec(), &[])?;
    Ok(ex.candidate_text(ex.argmax(&params.weights)).to_string())
}

/// Predictions for every record, in corpus order.
pub fn predict_corpus(params: &PolicyParams, corpus: &Corpus) -> Vec<(String, String)> {
    let examples = prepare_eval(corpus, params.spec());
    predict_examples(&params.weights, &examples)
        .into_iter()
        .zip(&corpus.records)
        .map(|(p, r)| (r.id.clone(), p))
        .collect()
}

pub(crate) fn prepare_eval(corpus: &Corpus, spec: FeatureSpec) -> Vec<Example> {
    corpus
        .records
        .par_iter()
        .map(|r| Example::from_record(r, spec, false).expect("no targets to resolve"))
        .collect()
}

pub(crate) fn predict_examples(weights: &[f64], examples: &[Example]) -> Vec<String> {
    examples
        .par_iter()
        .map(|ex| ex.candidate_text(ex.argmax(weights)).to_string())
        .collect()
}

/// Evaluate weights on prepared examples of `corpus` (same order).
pub(crate) fn evaluate_examples(
    weights: &[f64],
    examples: &[Example],
    corpus: &Corpus,
) -> crate::metrics::EvalReport {
    let predictions: HashMap<String, String> = corpus
        .records
        .iter()
        .map(|r| r.id.clone())
        .zip(predict_examples(weights, examples))
        .collect();
    crate::metrics::evaluate(&predictions, corpus).expect("every record predicted")
}
