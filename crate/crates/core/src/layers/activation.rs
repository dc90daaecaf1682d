use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::surrogate::{sign, SurrogateKind};
use crate::tensor::Tensor;

/// Negative slope of the leaky clip outside `[-1, 1]`.
pub const LEAKY_CLIP_SLOPE: f64 = 0.1;

/// Non-linearity applied to a binary convolution's input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    Relu,
    /// `x` inside `[-1, 1]`, slope `slope` outside.
    LeakyClip { slope: f64 },
    /// `clip(-1, x, 1)`.
    Clip,
    /// Forward `sign`, backward through the surrogate's derivative.
    Sign(SurrogateKind),
    /// The surrogate itself in both directions; used for gradient checks.
    Smooth(SurrogateKind),
}

impl Activation {
    pub fn leaky_clip() -> Self {
        Activation::LeakyClip { slope: LEAKY_CLIP_SLOPE }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Activation::Sign(_))
    }

    pub fn forward<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyClip { slope } => {
                if x.abs() <= one {
                    x
                } else {
                    sign(x) * (one + T::from_f64(slope) * (x.abs() - one))
                }
            }
            Activation::Clip => x.max(-one).min(one),
            Activation::Sign(_) => sign(x),
            Activation::Smooth(k) => k.primitive(x),
        }
    }

    /// Derivative (or surrogate derivative) at the pre-activation `x`.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        match self {
            Activation::Identity => one,
            Activation::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Activation::LeakyClip { slope } => {
                if x.abs() <= one {
                    one
                } else {
                    T::from_f64(slope)
                }
            }
            Activation::Clip => {
                if x.abs() <= one {
                    one
                } else {
                    T::zero()
                }
            }
            Activation::Sign(k) | Activation::Smooth(k) => k.derivative(x),
        }
    }
}

/// Elementwise forward of `act` over a tensor.
pub fn activation_forward<T: Scalar>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    x.map(|v| act.forward(v))
}

/// `upstream * act'(pre)`, with `pre` the cached pre-activation input.
pub fn activation_backward<T: Scalar>(upstream: &Tensor<T>, pre: &Tensor<T>, act: Activation) -> Result<Tensor<T>> {
    upstream.zip_map(pre, |g, x| g * act.derivative(x))
}

/// Binarizes activations; `sign(0) = +1`.
pub fn sign_activation_forward<T: Scalar>(a_r: &Tensor<T>) -> Tensor<T> {
    a_r.map(sign)
}

/// `upstream * F'(a_r)` for the chosen surrogate.
pub fn sign_activation_backward<T: Scalar>(
    upstream: &Tensor<T>,
    a_r: &Tensor<T>,
    kind: SurrogateKind,
) -> Result<Tensor<T>> {
    activation_backward(upstream, a_r, Activation::Sign(kind))
}
