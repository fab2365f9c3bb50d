use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::scalar::Scalar;

/// ADAM hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .params
            .iter()
            .map(|p| if p.trainable { vec![0.0; p.data.len()] } else { Vec::new() })
            .collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update of every trainable tensor. `grads` is
    /// aligned with `params.params`; entries for non-trainable tensors are ignored.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) {
        assert_eq!(grads.len(), params.len(), "gradient list does not match parameters");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            assert_eq!(g.len(), p.data.len(), "gradient shape for {}", p.name);
            for j in 0..g.len() {
                let gj = g[j].f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                let theta = p.data[j].f64() - lr * mhat / (vhat.sqrt() + eps);
                p.data[j] = T::of(theta);
            }
        }
    }
}
