use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        Self {
            cfg,
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = gi.as_f64();
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *pi = T::from_f64(pi.as_f64() - update);
            }
        }
    }

    /// SHA-256 over the step counter and both moment buffers.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.step.to_le_bytes());
        for buf in self.m.iter().chain(&self.v) {
            for x in buf {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}
