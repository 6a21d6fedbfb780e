//! Preference modelling and optimization.
//!
//! Bradley-Terry preference probabilities, the pairwise reward-model loss,
//! the KL-shaped reward, and the DPO family of losses over the policy's
//! log-ratio margin `h = (log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l))`.

mod dpo;
mod reward;

pub use dpo::{
    dpo_train, prepare_pairs, preference_loss, preference_loss_and_grad, DpoEpochLog, DpoOutcome, LossConfig,
    PreparedPair,
};
pub use reward::{reward, reward_model_loss, reward_model_loss_and_grad, RewardParams};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::policy::PolicyError;

#[derive(Debug, thiserror::Error)]
pub enum PrefOptError {
    #[error("pair {pair_id}: {source}")]
    Unresolvable { pair_id: String, source: PolicyError },
    #[error("non-finite {kind} loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        kind: LossKind,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("no preference pairs")]
    NoPairs,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry probability that the first response is preferred.
pub fn bt_preference_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Reward with a KL penalty toward the reference policy.
pub fn kl_shaped_reward(r_sigma_xy: f64, beta: f64, logp_theta: f64, logp_ref: f64) -> f64 {
    r_sigma_xy - beta * (logp_theta - logp_ref)
}

/// The four sequence log-probabilities a preference loss needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogps {
    pub theta_w: f64,
    pub ref_w: f64,
    pub theta_l: f64,
    pub ref_l: f64,
}

impl PairLogps {
    pub fn new(theta_w: f64, ref_w: f64, theta_l: f64, ref_l: f64) -> Self {
        PairLogps {
            theta_w,
            ref_w,
            theta_l,
            ref_l,
        }
    }

    pub fn margin(&self) -> f64 {
        (self.theta_w - self.ref_w) - (self.theta_l - self.ref_l)
    }

    pub fn is_finite(&self) -> bool {
        [self.theta_w, self.ref_w, self.theta_l, self.ref_l]
            .iter()
            .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Dpo,
    Ipo,
    RsoHinge,
}

impl LossKind {
    /// Loss as a function of the margin.
    pub fn value(self, h: f64, beta: f64) -> f64 {
        match self {
            LossKind::Dpo => softplus(-beta * h),
            LossKind::Ipo => {
                let d = h - 1.0 / (2.0 * beta);
                d * d
            }
            LossKind::RsoHinge => (1.0 - beta * h).max(0.0),
        }
    }

    /// Derivative of the loss with respect to the margin (subgradient 0 at the hinge).
    pub fn d_margin(self, h: f64, beta: f64) -> f64 {
        match self {
            LossKind::Dpo => -beta * sigmoid(-beta * h),
            LossKind::Ipo => 2.0 * (h - 1.0 / (2.0 * beta)),
            LossKind::RsoHinge => {
                if beta * h < 1.0 {
                    -beta
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Dpo => "dpo",
            LossKind::Ipo => "ipo",
            LossKind::RsoHinge => "rso",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dpo" => Ok(LossKind::Dpo),
            "ipo" => Ok(LossKind::Ipo),
            "rso" | "rso_hinge" => Ok(LossKind::RsoHinge),
            other => Err(format!("unknown loss {other:?} (expected dpo, ipo or rso)")),
        }
    }
}

/// `-log sigmoid(beta * h)`.
pub fn dpo_loss(logps: &PairLogps, beta: f64) -> f64 {
    LossKind::Dpo.value(logps.margin(), beta)
}

/// `(h - 1/(2 beta))^2`.
pub fn ipo_loss(logps: &PairLogps, beta: f64) -> f64 {
    LossKind::Ipo.value(logps.margin(), beta)
}

/// `max(0, 1 - beta * h)`.
pub fn rso_hinge_loss(logps: &PairLogps, beta: f64) -> f64 {
    LossKind::RsoHinge.value(logps.margin(), beta)
}
