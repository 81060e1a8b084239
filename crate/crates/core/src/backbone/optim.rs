//! Adam with bias-corrected first and second moments.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

impl Adam {
    /// Applies one update from the gradient slots of `params`.
    ///
    /// Every gradient is checked before anything is modified, so a non-finite gradient
    /// leaves both the parameters and the state untouched.
    pub fn step<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        state: &mut AdamState<T>,
        lr: f64,
    ) -> Result<()> {
        if state.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer state tracks {} tensors, store has {}",
                state.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if !params.grad(id).is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: params.name(id).to_string(),
                });
            }
        }
        state.step += 1;
        let t = state.step as f64;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powf(t));
        let bc2 = T::of(1.0 - self.beta2.powf(t));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = params.grad(id).clone();
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let value = params.get_mut(id);
            for (((w, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to zero over `total` steps.
pub fn cosine_lr(lr: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr;
    }
    let progress = (step.min(total) as f64) / total as f64;
    0.5 * lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
