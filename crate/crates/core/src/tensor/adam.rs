use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params(params: &[Arc<Tensor<T>>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Arc<Tensor<T>>]) -> Self {
        Self {
            config,
            state: AdamState::for_params(params),
        }
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [Arc<Tensor<T>>], grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one_m_b1, one_m_b2) = (T::from_f64_lossy(1.0 - beta1), T::from_f64_lossy(1.0 - beta2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(eps);

        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = Arc::make_mut(param).data_mut();
            match grad {
                Some(g) => {
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = b1 * m[j] + one_m_b1 * gj;
                        v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                        p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                        p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
                    }
                }
            }
        }
    }
}

pub fn global_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
