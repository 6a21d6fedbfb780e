use serde::{Deserialize, Serialize};

use super::{sigmoid, softplus, PrefOptError};
use crate::corpus::Prompt;
use crate::pairs::PreferencePair;
use crate::policy::{Example, FeatureSpec};

/// Linear reward over the policy's feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub weights: Vec<f64>,
    pub spec: FeatureSpec,
}

impl RewardParams {
    pub fn zeros(spec: FeatureSpec) -> Self {
        RewardParams {
            weights: vec![0.0; spec.dim],
            spec,
        }
    }
}

pub fn reward(params: &RewardParams, prompt: &Prompt, candidate: &str) -> Result<f64, PrefOptError> {
    let ex = Example::from_prompt(prompt, params.spec, &[candidate])?;
    Ok(ex.score(&params.weights, ex.index_of(candidate)?))
}

/// Mean `-log sigmoid(r(x, y_w) - r(x, y_l))` and its gradient.
pub fn reward_model_loss_and_grad(params: &RewardParams, pairs: &[PreferencePair]) -> Result<(f64, Vec<f64>), PrefOptError> {
    if pairs.is_empty() {
        return Err(PrefOptError::NoPairs);
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut grad = vec![0.0; params.weights.len()];
    let mut loss = 0.0;
    for pair in pairs {
        let prompt = Prompt::from_text(pair.prompt.as_str());
        let resolve = |e| PrefOptError::Unresolvable {
            pair_id: pair.id.clone(),
            source: e,
        };
        let ex = Example::from_prompt(&prompt, params.spec, &[&pair.chosen, &pair.rejected]).map_err(resolve)?;
        let w = ex.index_of(&pair.chosen).map_err(resolve)?;
        let l = ex.index_of(&pair.rejected).map_err(resolve)?;
        let gap = ex.score(&params.weights, w) - ex.score(&params.weights, l);
        loss += softplus(-gap);
        let coef = -sigmoid(-gap) * scale;
        ex.add_features(w, coef, &mut grad);
        ex.add_features(l, -coef, &mut grad);
    }
    Ok((loss * scale, grad))
}

pub fn reward_model_loss(params: &RewardParams, pairs: &[PreferencePair]) -> Result<f64, PrefOptError> {
    reward_model_loss_and_grad(params, pairs).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::Source;
    use crate::policy::slot;
    use std::f64::consts::LN_2;

    fn spec() -> FeatureSpec {
        FeatureSpec {
            dim: 1 << 10,
            l_max: 6,
            ..FeatureSpec::default()
        }
    }

    fn pair(chosen: &str, rejected: &str) -> PreferencePair {
        let prompt = Prompt::new("a 2 cm nodule in the left lobe .", "what is in the left lobe ?");
        PreferencePair::new("q", prompt.as_str(), chosen, rejected, Source::Model("A".into()))
    }

    #[test]
    fn zero_weights_give_ln2() {
        let pairs = vec![pair("2 cm nodule", ""), pair("2 cm nodule", "left lobe")];
        let loss = reward_model_loss(&RewardParams::zeros(spec()), &pairs).unwrap();
        assert_eq!(loss, LN_2);
    }

    #[test]
    fn unit_gap_matches_scalar_oracle() {
        // only the no-answer indicator is weighted: r(y_w) - r("") = 0 - (-1)
        let mut params = RewardParams::zeros(spec());
        params.weights[slot::NO_ANSWER as usize] = -1.0;
        let loss = reward_model_loss(&params, &[pair("2 cm nodule", "")]).unwrap();
        assert!((loss - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn gradient_step_decreases_loss() {
        let pairs = vec![pair("2 cm nodule", "left lobe")];
        let mut params = RewardParams::zeros(spec());
        let (before, grad) = reward_model_loss_and_grad(&params, &pairs).unwrap();
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w -= 0.1 * g;
        }
        let after = reward_model_loss(&params, &pairs).unwrap();
        assert!(after < before);
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(matches!(reward_model_loss(&RewardParams::zeros(spec()), &[]), Err(PrefOptError::NoPairs)));
    }
}
