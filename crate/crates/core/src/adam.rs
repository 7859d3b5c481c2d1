//! Adam optimizer with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::params::{ParamError, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment buffers for one parameter set. Buffers mirror the set's names and
/// shapes; `step` counts completed updates and drives bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One in-place update of `params` from `grads`. `grads` must carry the
    /// same names and shapes as `params`, in the same order.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), ParamError> {
        for index in 0..params.len() {
            let (name, p) = params.at(index);
            let g = grads
                .get(name)
                .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(ParamError::ShapeMismatch {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for index in 0..params.len() {
            let name = params.at(index).0.to_string();
            let g = grads.get(&name).unwrap().values().to_vec();
            let m = self.m.get_mut(&name).unwrap().values_mut();
            for (mi, &gi) in m.iter_mut().zip(&g) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            }
            let m: Vec<f64> = m.to_vec();
            let v = self.v.get_mut(&name).unwrap().values_mut();
            for (vi, &gi) in v.iter_mut().zip(&g) {
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            let v: Vec<f64> = v.to_vec();
            let (_, p) = params.at_mut(index);
            for ((pi, mi), vi) in p.values_mut().iter_mut().zip(&m).zip(&v) {
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                *pi -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Convenience for tests: single-tensor Adam without a named set.
pub fn adam_step_tensor(
    config: &AdamConfig,
    step: u64,
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
) {
    assert_eq!(param.shape(), grad.shape());
    let t = step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for i in 0..param.numel() {
        let g = grad.values()[i];
        let mi = &mut m.values_mut()[i];
        *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
        let m_hat = *mi / bias1;
        let vi = &mut v.values_mut()[i];
        *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
        let v_hat = *vi / bias2;
        param.values_mut()[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
}
