//! Adam with bias correction, keyed by parameter path.

use std::collections::BTreeMap;

use super::TrainError;
use crate::nn::Params;
use crate::tensor::Real;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<Real>,
    v: Vec<Real>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step over every parameter of `model`. Each parameter
    /// must carry a gradient; grads are left in place (callers zero them
    /// before the next accumulation).
    pub fn step(&mut self, model: &mut dyn Params, lr: Real) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut missing: Option<String> = None;
        model.visit_mut("", &mut |name, tensor| {
            if missing.is_some() {
                return;
            }
            let Some(grad) = tensor.grad().map(<[Real]>::to_vec) else {
                missing = Some(name.to_string());
                return;
            };
            let n = tensor.numel();
            let entry = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let values = tensor.values_mut();
            for i in 0..n {
                let g = grad[i];
                entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
                entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        });
        match missing {
            Some(name) => Err(TrainError::MissingGrad(name)),
            None => Ok(()),
        }
    }
}
