//! Supervised fine-tuning: maximum likelihood of the gold candidate with
//! mini-batch AdamW and dev-F1 model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::example::{log_softmax, Example, FeatureSpec};
use super::optim::{AdamConfig, AdamW};
use super::{evaluate_examples, prepare_eval, PolicyError, PolicyParams};
use crate::corpus::Corpus;
use crate::hashing::sub_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a dev-F1 improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub spec: FeatureSpec,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig::toy()
    }
}

impl SftConfig {
    /// Rates suited to the log-linear policy.
    pub fn toy() -> Self {
        SftConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            adam: AdamConfig::default(),
            spec: FeatureSpec::default(),
        }
    }

    /// The fine-tuning settings used for the large seq2seq models.
    pub fn paper_parity() -> Self {
        SftConfig {
            learning_rate: 5e-5,
            ..SftConfig::toy()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(PolicyError::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(PolicyError::Config("batch size and patience must be at least 1".into()));
        }
        if self.spec.dim <= super::slot::DENSE as usize || self.spec.l_max == 0 {
            return Err(PolicyError::Config("feature dimension or span length too small".into()));
        }
        Ok(())
    }
}

/// Tracks the best dev metric and signals when patience runs out.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record an epoch's metric; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_em: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Mean of `-log pi(target)` over a batch and its gradient (dense, added to `grad`).
pub fn sft_loss_and_grad(weights: &[f64], batch: &[(&Example, usize)], grad: &mut [f64]) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(ex, target) in batch {
        let lp = log_softmax(&ex.scores(weights));
        loss -= lp[target];
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        ex.add_log_prob_grad(target, &probs, -scale, grad);
    }
    loss * scale
}

fn mean_nll(weights: &[f64], examples: &[(Example, usize)]) -> f64 {
    let total: f64 = examples
        .par_iter()
        .map(|(ex, t)| -log_softmax(&ex.scores(weights))[*t])
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / examples.len() as f64
}

pub fn sft_train(train: &Corpus, dev: &Corpus, config: &SftConfig, seed: u64) -> Result<SftOutcome, PolicyError> {
    config.validate()?;
    if train.is_empty() {
        return Err(PolicyError::EmptyCorpus("train"));
    }
    if dev.is_empty() {
        return Err(PolicyError::EmptyCorpus("dev"));
    }
    let spec = config.spec;
    let examples: Vec<(Example, usize)> = train
        .records
        .par_iter()
        .map(|r| {
            let ex = Example::from_record(r, spec, true)?;
            let target = ex.index_of(r.chosen())?;
            Ok((ex, target))
        })
        .collect::<Result<_, PolicyError>>()?;
    let dev_examples = prepare_eval(dev, spec);

    let mut params = PolicyParams::zeros(spec, seed);
    let mut best = params.weights.clone();
    let mut optimizer = AdamW::new(spec.dim, config.learning_rate, config.weight_decay, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "sft-shuffle"));
    let mut stopper = EarlyStopping::new(config.patience);
    let mut grad = vec![0.0; spec.dim];
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let report = evaluate_examples(&params.weights, &dev_examples, dev);
    stopper.observe(0, report.f1);
    let mut history = vec![EpochLog {
        epoch: 0,
        train_loss: mean_nll(&params.weights, &examples),
        dev_em: report.em,
        dev_f1: report.f1,
    }];

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&Example, usize)> = chunk.iter().map(|&i| (&examples[i].0, examples[i].1)).collect();
            grad.fill(0.0);
            let loss = sft_loss_and_grad(&params.weights, &batch, &mut grad);
            if !loss.is_finite() {
                return Err(PolicyError::NonFiniteLoss { epoch, batch: b, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            optimizer.step(&mut params.weights, &grad);
        }
        let report = evaluate_examples(&params.weights, &dev_examples, dev);
        history.push(EpochLog {
            epoch,
            train_loss: epoch_loss / examples.len() as f64,
            dev_em: report.em,
            dev_f1: report.f1,
        });
        log::debug!("sft epoch {epoch}: loss {:.4} dev {report}", epoch_loss / examples.len() as f64);
        if stopper.observe(epoch, report.f1) {
            best.copy_from_slice(&params.weights);
        }
        if stopper.should_stop() {
            break;
        }
    }
    params.weights = best;
    Ok(SftOutcome {
        params,
        history,
        best_epoch: stopper.best_epoch(),
    })
}
