//! AdamW: Adam moments with decoupled weight decay applied directly to the
//! parameters, `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.

use crate::encoder::ParamStore;
use crate::error::{Result, SpmixError};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// Desk-scale schedule; the full-scale 5e-6 rate stays available via
    /// config files.
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in the store, consuming the gradients
    /// left by the last backward pass (missing gradients count as zero).
    /// Returns the global L2 gradient norm. NaN gradients abort with the
    /// parameter's name.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f64> {
        if self.m.is_empty() {
            self.m = params
                .entries()
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(SpmixError::contract(format!(
                "optimizer state tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let mut grad_sq = 0.0;
        for i in 0..params.len() {
            let (grad, shape, mut next) = {
                let (name, tensor) = &params.entries()[i];
                let grad = tensor.grad_or_zeros();
                if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
                    return Err(SpmixError::Numeric(format!(
                        "non-finite gradient {} in parameter '{name}' at flat index {pos}",
                        grad[pos]
                    )));
                }
                (grad, tensor.shape().to_vec(), tensor.data().to_vec())
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..next.len() {
                let g = grad[j];
                grad_sq += g * g;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                next[j] = next[j] * (1.0 - c.lr * c.weight_decay)
                    - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            params.replace(i, Tensor::from_parts(shape, next, true));
        }
        Ok(grad_sq.sqrt())
    }
}
