//! AdamW over named `f32` parameter groups with `f64` moments.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            weight_decay: 0.0,
        }
    }
}

/// Storage precision of an optimised parameter.
pub trait Param: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Param for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Param for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    /// One AdamW update of a parameter group. Groups keep independent step
    /// counts, so sparsely-touched groups get correct bias correction.
    pub fn update<P: Param>(&mut self, name: &str, params: &mut [P], grads: &[f64]) {
        self.update_with_lr(name, params, grads, self.config.lr);
    }

    pub fn update_with_lr<P: Param>(&mut self, name: &str, params: &mut [P], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch for {name}");
        let c = &self.config;
        let st = self.state.entry(name.to_string()).or_default();
        if st.m.len() != params.len() {
            st.m = vec![0.0; params.len()];
            st.v = vec![0.0; params.len()];
            st.step = 0;
        }
        st.step += 1;
        let bc1 = 1.0 - c.beta1.powi(st.step as i32);
        let bc2 = 1.0 - c.beta2.powi(st.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            let mut p = params[i].to_f64();
            if c.weight_decay != 0.0 {
                p -= lr * c.weight_decay * p;
            }
            p -= lr * m_hat / (v_hat.sqrt() + c.eps);
            params[i] = P::from_f64(p);
        }
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }
}
