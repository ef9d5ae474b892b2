//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tape::ParamSet;
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        AdamW {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        let c = self.config;
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (k, p) in params.tensors.iter_mut().enumerate() {
            let g = &grads[k].data;
            let m = &mut self.first[k].data;
            let v = &mut self.second[k].data;
            for i in 0..p.data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
    }
}
