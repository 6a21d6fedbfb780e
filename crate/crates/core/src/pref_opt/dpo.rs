//! Preference optimization of the policy against a frozen reference copy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LossKind, PairLogps, PrefOptError};
use crate::corpus::{Corpus, Prompt};
use crate::hashing::sub_seed;
use crate::pairs::PreferencePair;
use crate::policy::{log_softmax, AdamConfig, AdamW, EarlyStopping, Example, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub loss: LossKind,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Pairs per gradient evaluation.
    pub micro_batch: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accum_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::toy()
    }
}

impl LossConfig {
    pub fn toy() -> Self {
        LossConfig {
            loss: LossKind::Dpo,
            beta: 0.1,
            learning_rate: 0.01,
            weight_decay: 0.01,
            micro_batch: 16,
            accum_steps: 1,
            max_epochs: 20,
            patience: 5,
            adam: AdamConfig::default(),
        }
    }

    pub fn paper_parity() -> Self {
        LossConfig {
            learning_rate: 5e-7,
            micro_batch: 2,
            accum_steps: 8,
            ..LossConfig::toy()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }

    pub fn validate(&self) -> Result<(), PrefOptError> {
        if !(self.beta > 0.0) {
            return Err(PrefOptError::Config("beta must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(PrefOptError::Config(
                "learning rate must be positive, weight decay non-negative".into(),
            ));
        }
        if self.micro_batch == 0 || self.accum_steps == 0 || self.patience == 0 {
            return Err(PrefOptError::Config("batch sizes and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// A pair resolved against its prompt's candidate set, with the frozen
/// reference log-probabilities attached.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub id: String,
    pub example: Example,
    pub chosen: usize,
    pub rejected: usize,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl PreparedPair {
    pub fn logps(&self, weights: &[f64]) -> PairLogps {
        let lp = log_softmax(&self.example.scores(weights));
        PairLogps::new(lp[self.chosen], self.ref_chosen, lp[self.rejected], self.ref_rejected)
    }
}

pub fn prepare_pairs(pairs: &[PreferencePair], reference: &PolicyParams) -> Result<Vec<PreparedPair>, PrefOptError> {
    let spec = reference.spec();
    pairs
        .par_iter()
        .map(|pair| {
            let resolve = |source| PrefOptError::Unresolvable {
                pair_id: pair.id.clone(),
                source,
            };
            let prompt = Prompt::from_text(pair.prompt.as_str());
            let example = Example::from_prompt(&prompt, spec, &[&pair.chosen, &pair.rejected]).map_err(resolve)?;
            let chosen = example.index_of(&pair.chosen).map_err(resolve)?;
            let rejected = example.index_of(&pair.rejected).map_err(resolve)?;
            let lp = log_softmax(&example.scores(&reference.weights));
            Ok(PreparedPair {
                id: pair.id.clone(),
                ref_chosen: lp[chosen],
                ref_rejected: lp[rejected],
                example,
                chosen,
                rejected,
            })
        })
        .collect()
}

/// Mean loss and mean margin over `batch`; adds `scale * dL/dw` per pair into `grad`.
///
/// For a softmax over a shared candidate set,
/// `grad log pi(y_w) - grad log pi(y_l) = phi(y_w) - phi(y_l)`.
pub fn preference_loss_and_grad(
    weights: &[f64],
    batch: &[&PreparedPair],
    kind: LossKind,
    beta: f64,
    scale: f64,
    grad: &mut [f64],
) -> (f64, f64) {
    let mut loss = 0.0;
    let mut margin = 0.0;
    for p in batch {
        let h = p.logps(weights).margin();
        loss += kind.value(h, beta);
        margin += h;
        let coef = kind.d_margin(h, beta) * scale;
        if coef != 0.0 {
            p.example.add_features(p.chosen, coef, grad);
            p.example.add_features(p.rejected, -coef, grad);
        }
    }
    let n = batch.len().max(1) as f64;
    (loss / n, margin / n)
}

pub fn preference_loss(weights: &[f64], batch: &[&PreparedPair], kind: LossKind, beta: f64) -> f64 {
    batch.iter().map(|p| kind.value(p.logps(weights).margin(), beta)).sum::<f64>() / batch.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_margin: f64,
    pub dev_em: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub params: PolicyParams,
    /// The frozen reference, as used throughout the run.
    pub reference: PolicyParams,
    pub history: Vec<DpoEpochLog>,
    pub best_epoch: usize,
}

/// Optimize a copy of `sft_params` on preference pairs; the reference is a
/// second copy that is never written. Epoch 0 is the starting point, so a run
/// that never beats it on dev F1 returns the SFT weights unchanged.
pub fn dpo_train(
    sft_params: &PolicyParams,
    pairs: &[PreferencePair],
    dev: &Corpus,
    config: &LossConfig,
    seed: u64,
) -> Result<DpoOutcome, PrefOptError> {
    config.validate()?;
    let reference = sft_params.clone();
    let mut policy = sft_params.clone();
    let prepared = prepare_pairs(pairs, &reference)?;
    let dev_examples = crate::policy::prepare_eval(dev, reference.spec());

    let report = crate::policy::evaluate_examples(&policy.weights, &dev_examples, dev);
    let all: Vec<&PreparedPair> = prepared.iter().collect();
    let mut history = vec![DpoEpochLog {
        epoch: 0,
        train_loss: preference_loss(&policy.weights, &all, config.loss, config.beta),
        mean_margin: 0.0,
        dev_em: report.em,
        dev_f1: report.f1,
    }];
    let mut stopper = EarlyStopping::new(config.patience);
    stopper.observe(0, report.f1);
    if config.max_epochs == 0 || prepared.is_empty() {
        return Ok(DpoOutcome {
            params: policy,
            reference,
            history,
            best_epoch: 0,
        });
    }

    let dim = policy.weights.len();
    let mut optimizer = AdamW::new(dim, config.learning_rate, config.weight_decay, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "dpo-shuffle"));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut grad = vec![0.0; dim];
    let mut best = policy.weights.clone();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut margin_sum) = (0.0, 0.0);
        for (b, step) in order.chunks(config.effective_batch()).enumerate() {
            grad.fill(0.0);
            let scale = 1.0 / step.len() as f64;
            for micro in step.chunks(config.micro_batch) {
                let batch: Vec<&PreparedPair> = micro.iter().map(|&i| &prepared[i]).collect();
                let (loss, margin) =
                    preference_loss_and_grad(&policy.weights, &batch, config.loss, config.beta, scale, &mut grad);
                if !loss.is_finite() {
                    return Err(PrefOptError::NonFiniteLoss {
                        kind: config.loss,
                        epoch,
                        batch: b,
                        loss,
                    });
                }
                loss_sum += loss * micro.len() as f64;
                margin_sum += margin * micro.len() as f64;
            }
            optimizer.step(&mut policy.weights, &grad);
        }
        let report = crate::policy::evaluate_examples(&policy.weights, &dev_examples, dev);
        let n = prepared.len() as f64;
        history.push(DpoEpochLog {
            epoch,
            train_loss: loss_sum / n,
            mean_margin: margin_sum / n,
            dev_em: report.em,
            dev_f1: report.f1,
        });
        log::debug!("{} epoch {epoch}: loss {:.4} margin {:.4} dev {report}", config.loss, loss_sum / n, margin_sum / n);
        if stopper.observe(epoch, report.f1) {
            best.copy_from_slice(&policy.weights);
        }
        if stopper.should_stop() {
            break;
        }
    }
    policy.weights = best;
    Ok(DpoOutcome {
        params: policy,
        reference,
        history,
        best_epoch: stopper.best_epoch(),
    })
}
