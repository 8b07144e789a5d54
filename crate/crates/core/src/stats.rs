//! Channel statistics and the accumulated (running) estimates used by
//! normalization at inference.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;

use crate::error::{bail, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to the variance before the square root.
pub const STD_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running estimates.
pub const RUNNING_MOMENTUM: f64 = 0.1;

/// Per-channel mean and epsilon-floored population std over batch and
/// spatial axes of `[B,C,H,W]`.
pub fn channel_stats<T: Scalar>(input: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = input.dims4()?;
    if b * h * w < 2 {
        bail!(Dimension, "channel_stats needs at least 2 values per channel, got {}", b * h * w);
    }
    let (mean, var) = kernels::channel_moments(input.data(), b, c, h * w);
    let mean = mean.into_iter().map(T::from_f64).collect();
    let std = var.into_iter().map(|v| T::from_f64((v + eps).sqrt())).collect();
    Ok((Tensor::new(&[c], mean)?, Tensor::new(&[c], std)?))
}

/// Accumulated mean/variance for one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &m) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}
