//! Weight binarization: latent real weights, magnitude-aware scaling, the
//! clipped straight-through weight gradient, SGD updates, and folding of the
//! training-time scale into batch-norm statistics for sign-only inference.

use serde::{Deserialize, Serialize};

use crate::bits::{binary_conv2d, sign_pack, BitTensor};
use crate::error::{dim_err, Error, Result};
use crate::layers::BatchNormState;
use crate::scalar::Scalar;
use crate::surrogate::{sign, SurrogateKind};
use crate::tensor::Tensor;

/// How the per-filter scale is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleNorm {
    /// Mean absolute value of the filter.
    #[default]
    Mean,
    /// Raw L1 norm of the filter.
    Sum,
}

/// How a convolution's weights are presented to the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Real,
    /// `sign(W_r)`.
    Sign,
    /// `s_o * sign(W_r)` with `s_o` the per-filter magnitude.
    MagnitudeAware,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarizeOptions {
    pub norm: ScaleNorm,
    /// Differentiate through the scale factor as well as through the sign.
    pub scale_grad: bool,
    /// Replace `sign` by a smooth surrogate in the forward pass too, making
    /// the whole map differentiable (gradient checks only).
    pub smooth: Option<SurrogateKind>,
}

impl Default for BinarizeOptions {
    fn default() -> Self {
        BinarizeOptions { norm: ScaleNorm::Mean, scale_grad: true, smooth: None }
    }
}

impl BinarizeOptions {
    fn sgn<T: Scalar>(&self, w: T) -> T {
        match self.smooth {
            Some(k) => k.primitive(w),
            None => sign(w),
        }
    }

    fn sgn_slope<T: Scalar>(&self, w: T) -> T {
        match self.smooth {
            Some(k) => k.derivative(w),
            None => {
                // clipped straight-through estimator, strict |w| < 1
                if w.abs() < T::one() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

fn filters<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize)> {
    let o = *w.shape().first().ok_or_else(|| dim_err!("weights need an output axis"))?;
    if o == 0 {
        return Err(dim_err!("weights have no output filters"));
    }
    Ok((o, w.len() / o))
}

/// Per-output-filter magnitude `s_o`.
pub fn filter_scales<T: Scalar>(w: &Tensor<T>, norm: ScaleNorm) -> Result<Vec<T>> {
    let (o, n) = filters(w)?;
    (0..o)
        .map(|f| {
            let l1: T = w.data()[f * n..(f + 1) * n].iter().map(|v| v.abs()).sum();
            if l1 == T::zero() {
                return Err(Error::DegenerateFilter { filter: f });
            }
            Ok(match norm {
                ScaleNorm::Mean => l1 / T::from_f64(n as f64),
                ScaleNorm::Sum => l1,
            })
        })
        .collect()
}

/// `W_b[o] = s_o * sign(W_r[o])` with `s_o` the mean absolute value of filter `o`.
pub fn magnitude_aware_binarize<T: Scalar>(w: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    binarize_weights(w, WeightMode::MagnitudeAware, &BinarizeOptions::default())
}

/// Forward weight transform for any mode. Returned scales are all ones for
/// [`WeightMode::Sign`] and empty for [`WeightMode::Real`].
pub fn binarize_weights<T: Scalar>(
    w: &Tensor<T>,
    mode: WeightMode,
    opts: &BinarizeOptions,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (o, n) = filters(w)?;
    match mode {
        WeightMode::Real => Ok((w.clone(), Vec::new())),
        WeightMode::Sign => Ok((w.map(|v| opts.sgn(v)), vec![T::one(); o])),
        WeightMode::MagnitudeAware => {
            let scales = filter_scales(w, opts.norm)?;
            let wb = Tensor::from_fn(w.shape().to_vec(), |i| scales[i / n] * opts.sgn(w.data()[i]));
            Ok((wb, scales))
        }
    }
}

/// `dL/dW_r` from `dL/dW_b`.
///
/// For [`WeightMode::MagnitudeAware`] with `scale_grad` this is the full
/// product rule through `W_b = s(W_r) * sign(W_r)`:
/// `g_i * s * 1{|w_i|<1} + (sign(w_i) / n) * sum_j g_j * sign(w_j)`, the whole
/// expression gated by the same indicator. Without `scale_grad` (and for
/// [`WeightMode::Sign`]) it reduces to `g_i * 1{|w_i|<1}`.
pub fn weight_backward<T: Scalar>(
    upstream: &Tensor<T>,
    w: &Tensor<T>,
    scales: &[T],
    mode: WeightMode,
    opts: &BinarizeOptions,
) -> Result<Tensor<T>> {
    upstream.expect_shape(w.shape())?;
    let (o, n) = filters(w)?;
    let g = upstream.data();
    let wd = w.data();
    match mode {
        WeightMode::Real => Ok(upstream.clone()),
        WeightMode::Sign => Ok(Tensor::from_fn(w.shape().to_vec(), |i| g[i] * opts.sgn_slope(wd[i]))),
        WeightMode::MagnitudeAware => {
            if scales.len() != o {
                return Err(dim_err!("{} scales for {o} filters", scales.len()));
            }
            let kappa = match opts.norm {
                ScaleNorm::Mean => T::one() / T::from_f64(n as f64),
                ScaleNorm::Sum => T::one(),
            };
            let mut out = vec![T::zero(); w.len()];
            for f in 0..o {
                let r = f * n..(f + 1) * n;
                let through_scale: T = if opts.scale_grad {
                    r.clone().map(|j| g[j] * opts.sgn(wd[j])).sum::<T>() * kappa
                } else {
                    T::zero()
                };
                for i in r {
                    out[i] = if !opts.scale_grad {
                        g[i] * opts.sgn_slope(wd[i])
                    } else if opts.smooth.is_some() {
                        g[i] * scales[f] * opts.sgn_slope(wd[i]) + sign(wd[i]) * through_scale
                    } else {
                        opts.sgn_slope(wd[i]) * (g[i] * scales[f] + sign(wd[i]) * through_scale)
                    };
                }
            }
            Tensor::new(w.shape().to_vec(), out)
        }
    }
}

/// Latent real weights of a binarized convolution with their cached scales.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWeight {
    weights: Tensor<f64>,
    scales: Vec<f64>,
    norm: ScaleNorm,
    frozen: bool,
}

impl LatentWeight {
    pub fn new(weights: Tensor<f64>, norm: ScaleNorm) -> Result<Self> {
        let scales = filter_scales(&weights, norm)?;
        Ok(LatentWeight { weights, scales, norm, frozen: false })
    }

    pub fn weights(&self) -> &Tensor<f64> {
        &self.weights
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Replaces the latent weights; scales are recomputed immediately.
    pub fn set(&mut self, weights: Tensor<f64>) -> Result<()> {
        if self.frozen {
            return Err(Error::Domain("frozen weights cannot be updated".into()));
        }
        weights.expect_shape(self.weights.shape())?;
        self.scales = filter_scales(&weights, self.norm)?;
        self.weights = weights;
        Ok(())
    }

    /// Constrains the weights to `sign(W_r)` and stops further updates.
    pub fn freeze(&mut self) {
        self.weights = self.weights.map(sign);
        self.scales = filter_scales(&self.weights, self.norm).expect("sign weights are nonzero");
        self.frozen = true;
    }
}

/// Momentum SGD on a flat parameter buffer:
/// `v <- momentum * v + (g + decay * w)`, `w <- w - lr * v`.
pub fn sgd_update(
    weights: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if weights.len() != grad.len() || weights.len() != velocity.len() {
        return Err(dim_err!(
            "sgd buffers disagree: {} weights, {} grads, {} velocities",
            weights.len(),
            grad.len(),
            velocity.len()
        ));
    }
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::Domain(format!("learning rate {lr} must be finite and non-negative")));
    }
    for ((w, &g), v) in weights.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
    Ok(())
}

/// A binary convolution whose training-time scale has been folded into the
/// following batch norm: `z = gamma * (y - mean') / std' + beta` with
/// `mean' = mean / s` and `std' = sqrt(var + eps) / s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedLayer {
    pub weights: BitTensor,
    pub stride: usize,
    pub pad: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ExportedLayer {
    /// Binary convolution of already sign-packed activations, then the folded
    /// normalization.
    pub fn forward(&self, input: &BitTensor) -> Result<Tensor<f64>> {
        let y = binary_conv2d(input, &self.weights, self.stride, self.pad)?;
        let &[n, c, h, w] = y.shape() else { unreachable!() };
        let hw = h * w;
        let mut out = Vec::with_capacity(y.data().len());
        for (i, &v) in y.data().iter().enumerate() {
            let ch = (i / hw) % c;
            out.push(self.gamma[ch] * (v as f64 - self.mean[ch]) / self.std[ch] + self.beta[ch]);
        }
        Tensor::new(vec![n, c, h, w], out)
    }
}

/// Folds per-filter scales `s` into the batch-norm running statistics and
/// packs `sign(W_r)`. `gamma`/`beta` are carried over unchanged.
pub fn absorb_scale_into_bn(
    weights: &Tensor<f64>,
    scales: &[f64],
    bn: &BatchNormState,
    stride: usize,
    pad: usize,
) -> Result<ExportedLayer> {
    let (o, _) = filters(weights)?;
    if scales.len() != o || bn.channels() != o {
        return Err(dim_err!("{o} filters, {} scales, {} batch-norm channels", scales.len(), bn.channels()));
    }
    if let Some(f) = scales.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::DegenerateFilter { filter: f });
    }
    let mean = (0..o).map(|c| bn.running_mean[c] / scales[c]).collect();
    let std = (0..o).map(|c| (bn.running_var[c] + bn.eps).sqrt() / scales[c]).collect();
    Ok(ExportedLayer {
        weights: sign_pack(weights),
        stride,
        pad,
        mean,
        std,
        gamma: bn.gamma.clone(),
        beta: bn.beta.clone(),
    })
}

/// Outcome of scaling a conv's weights by `alpha` ahead of a batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub alpha: f64,
    /// `max |Z(alpha W) - Z(W)|` over the batch-norm output.
    pub forward_delta: f64,
    /// `||dL/dW(alpha W)|| / ||dL/dW(W)||` in the L2 norm.
    pub gradient_ratio: f64,
}

/// A fixed conv -> batch-norm fragment (gamma 1, beta 0, eps 0, batch
/// statistics) under the loss `sum(Z * R)` for a fixed random `R`.
struct Fragment {
    x: Tensor<f64>,
    w: Tensor<f64>,
    r: Tensor<f64>,
}

impl Fragment {
    fn new(seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: Vec<usize>, k: f64| Tensor::from_fn(shape, |_| k * rng.gen_range(-1.0..1.0));
        let x = draw(vec![4, 3, 6, 6], 1.0);
        let w = draw(vec![5, 3, 3, 3], 0.1);
        let r = draw(vec![4, 5, 6, 6], 1.0);
        Fragment { x, w, r }
    }

    /// BN output and gradients with respect to the latent weights and to the
    /// transformed weights fed to the conv.
    fn run(&self, w: &Tensor<f64>, mode: WeightMode) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<f64>)> {
        use crate::graph::Graph;
        let mut g = Graph::<f64>::new();
        let x = g.leaf(self.x.clone());
        let wr = g.leaf(w.clone());
        let wb = g.binarize(wr, mode, BinarizeOptions::default())?;
        let c = w.shape()[0];
        let gamma = g.leaf(Tensor::full(vec![c], 1.0));
        let beta = g.leaf(Tensor::zeros(vec![c]));
        let y = g.conv2d(x, wb, 1, 1)?;
        let z = g.batch_norm(y, gamma, beta, 0.0, None)?;
        let scales = g.scales(wb).map(<[f64]>::to_vec).unwrap_or_default();
        let grads = g.backward_with(z, self.r.clone())?;
        Ok((g.value(z).clone(), grads.get_or_zeros(wr, &g), grads.get_or_zeros(wb, &g), scales))
    }
}

fn l2(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales the fragment's real conv weights by `alpha` and reports how the
/// batch-norm output and the weight gradient change.
pub fn lemma1_check(alpha: f64) -> Result<Lemma1Report> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be positive and finite, got {alpha}")));
    }
    let frag = Fragment::new(0x1e44a1);
    let (z1, g1, _, _) = frag.run(&frag.w, WeightMode::Real)?;
    let (z2, g2, _, _) = frag.run(&frag.w.scale(alpha), WeightMode::Real)?;
    Ok(Lemma1Report { alpha, forward_delta: z1.max_abs_diff(&z2)?, gradient_ratio: l2(&g2) / l2(&g1) })
}

/// Per-filter ratio `||dL/dW_b||_1` (plain sign) over `||dL/dW_b||_1`
/// (magnitude-aware) on the fixed fragment, paired with the filter scales.
pub fn gradient_restoration() -> Result<Vec<(f64, f64)>> {
    let frag = Fragment::new(0x5ca1e);
    let (_, _, g_sign, _) = frag.run(&frag.w, WeightMode::Sign)?;
    let (_, _, g_ma, scales) = frag.run(&frag.w, WeightMode::MagnitudeAware)?;
    let n = frag.w.len() / scales.len();
    let l1 = |t: &Tensor<f64>, f: usize| t.data()[f * n..(f + 1) * n].iter().map(|v| v.abs()).sum::<f64>();
    Ok(scales.iter().enumerate().map(|(f, &s)| (l1(&g_sign, f) / l1(&g_ma, f), s)).collect())
}
