use alloc::vec::Vec;

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;

use crate::error::{bail, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every tensor of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            bail!(Config, "learning rate must be positive, got {}", config.lr);
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            bail!(Config, "adam betas must lie in [0, 1)");
        }
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(AdamState { config, step: 0, m: zeros(), v: zeros() })
    }

    /// One bias-corrected update. `grads[i]` is `None` for tensors that
    /// received no gradient; they still decay their moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<&[T]>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            bail!(Dimension, "adam: {} grads for {} parameters", grads.len(), store.len());
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for (i, g) in grads.iter().enumerate() {
            let p = store.tensor_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            if let Some(g) = g {
                if g.len() != p.len() {
                    bail!(Dimension, "adam: gradient {i} has {} values for {}", g.len(), p.len());
                }
            }
            for k in 0..p.len() {
                let gk = g.map_or(T::zero(), |g| g[k]);
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] = p[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
