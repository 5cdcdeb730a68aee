//! AdamW: Adam with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::vit::EncoderWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Optimizer state keyed by parameter name. Step counts are per parameter,
/// so parameters that start training late get fresh bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Updates only the parameters named in `grads`.
    pub fn step(&mut self, weights: &mut EncoderWeights<f32>, grads: &[(String, Tensor<f32>)], lr: f64) {
        let c = &self.config;
        for (name, g) in grads {
            let p = weights
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            assert_eq!(p.shape(), g.shape(), "gradient shape for `{name}`");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            for (i, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv as f64;
                let mut x = *w as f64;
                x -= lr * c.weight_decay * x;
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gv;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gv * gv;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = x as f32;
            }
        }
    }
}
