//! Adam optimizer over a named parameter store.

use crate::blocks::ModelState;
use crate::error::{MirError, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, aligned with the store's parameter order.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelState) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { m, v, step: 0 }
    }

    /// One update from the gradients currently stored on the parameters.
    /// Parameters without a gradient (no flow this step) are skipped.
    /// Clears all gradients afterwards.
    pub fn step(&mut self, params: &ModelState, hyper: &AdamHyper) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (i, (name, param)) in params.iter().enumerate() {
            let Some(grad) = param.grad() else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(MirError::Numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = param.data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
                v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}
