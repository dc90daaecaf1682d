//! Per-channel batch normalization over NCHW maps.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Learnable affine parameters plus running statistics.
///
/// Variances are biased (divide by the element count), in training and in the
/// running estimate alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving update from one batch's statistics.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
        }
    }
}

/// Values retained by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics; `None` when running statistics were used.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

fn channel_view<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[n, c, h, w] => Ok((n, c, h * w)),
        &[n, c] => Ok((n, c, 1)),
        s => Err(dim_err!("batch norm expects NCHW or NC input, got {s:?}")),
    }
}

fn inv_std<T: Scalar>(var: T, eps: T, channel: usize) -> Result<T> {
    let denom = (var + eps).sqrt();
    if denom <= T::zero() || !denom.is_finite() {
        return Err(Error::Singular(format!("channel {channel} has zero variance and eps = 0")));
    }
    Ok(T::one() / denom)
}

/// Forward pass. With `running = None` batch statistics are used (training
/// mode); otherwise `(mean, var)` are the running estimates.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
    running: Option<(&[T], &[T])>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = channel_view(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(dim_err!("batch norm over {c} channels got {} / {} parameters", gamma.len(), beta.len()));
    }
    let xd = x.data();
    let at = |b: usize, ch: usize| (b * c + ch) * hw;
    let (mean, var, batch) = match running {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(dim_err!("running statistics do not cover {c} channels"));
            }
            (m.to_vec(), v.to_vec(), false)
        }
        None => {
            let count = n * hw;
            if count < 2 {
                return Err(dim_err!("training-mode batch norm needs at least 2 values per channel, got {count}"));
            }
            let inv_count = T::one() / T::from_f64(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s = s + xd[at(b, ch)..at(b, ch) + hw].iter().copied().sum::<T>();
                }
                let mu = s * inv_count;
                let mut q = T::zero();
                for b in 0..n {
                    for &v in &xd[at(b, ch)..at(b, ch) + hw] {
                        q = q + (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = q * inv_count;
            }
            (mean, var, true)
        }
    };
    let inv: Vec<T> = (0..c).map(|ch| inv_std(var[ch], eps, ch)).collect::<Result<_>>()?;

    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = at(b, ch)..at(b, ch) + hw;
            for i in r {
                let h = (xd[i] - mean[ch]) * inv[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    let cache = BnCache {
        xhat: Tensor::new(shape.clone(), xhat)?,
        inv_std: inv,
        batch_stats: batch.then_some((mean, var)),
    };
    Ok((Tensor::new(shape, y)?, cache))
}

/// Returns `(dL/dx, dL/dgamma, dL/dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    grad_out.expect_shape(cache.xhat.shape())?;
    let (n, c, hw) = channel_view(grad_out)?;
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let at = |b: usize, ch: usize| (b * c + ch) * hw;

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            for i in at(b, ch)..at(b, ch) + hw {
                dbeta[ch] = dbeta[ch] + gy[i];
                dgamma[ch] = dgamma[ch] + gy[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gy.len()];
    let training = cache.batch_stats.is_some();
    let m = T::from_f64((n * hw) as f64);
    for ch in 0..c {
        let k = gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            for i in at(b, ch)..at(b, ch) + hw {
                dx[i] = if training {
                    k * (gy[i] - dbeta[ch] / m - xh[i] * dgamma[ch] / m)
                } else {
                    k * gy[i]
                };
            }
        }
    }
    Ok((Tensor::new(grad_out.shape().to_vec(), dx)?, dgamma, dbeta))
}
