//! Adaptive moment estimation over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Per-parameter first/second moment state keyed by parameter name.
pub struct Adam {
    pub config: AdamConfig,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, slots: BTreeMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(param.len(), grad.len(), "grad shape mismatch for {name}");
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        slot.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - c.beta2.powi(slot.t as i32);
        for i in 0..param.len() {
            let g = grad.data[i];
            slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
            slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            param.data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        let mut x = Tensor::vector(vec![3.0, -2.0]);
        for _ in 0..500 {
            let grad = Tensor::vector(x.data.iter().map(|v| 2.0 * v).collect());
            adam.step("x", &mut x, &grad);
        }
        assert!(x.data.iter().all(|v| v.abs() < 1e-2), "{:?}", x.data);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = Adam::new(AdamConfig::default());
            let mut x = Tensor::vector(vec![1.0, 2.0, 3.0]);
            for i in 0..50 {
                let grad = Tensor::vector(x.data.iter().map(|v| v.sin() + i as f64 * 0.01).collect());
                adam.step("x", &mut x, &grad);
            }
            x.data
        };
        assert_eq!(run(), run());
    }
}
