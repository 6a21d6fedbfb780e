//! Adam with decoupled weight decay over a dense parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(dim: usize, lr: f64, weight_decay: f64, config: AdamConfig) -> Self {
        AdamW {
            lr,
            weight_decay,
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(weights.len(), grad.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((w, &g), m), v) in weights
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if g == 0.0 && *m == 0.0 && *w == 0.0 {
                continue;
            }
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w = *w * decay - self.lr * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
        }
    }
}
