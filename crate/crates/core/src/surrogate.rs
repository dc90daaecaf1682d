//! Differentiable stand-ins for `sign` used in the backward pass.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Which approximation supplies the sign function's derivative.
///
/// Every variant has `sign` as its forward; only the backward differs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// `clip(-1, x, 1)`; derivative is the box `1_{|x|<1}`.
    ClipSte,
    /// Second-order piecewise polynomial; triangular derivative.
    ApproxSign2,
    /// Third-order piecewise polynomial; piecewise-quadratic derivative.
    ApproxSign3,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 3] =
        [SurrogateKind::ClipSte, SurrogateKind::ApproxSign2, SurrogateKind::ApproxSign3];

    /// `F(x)`.
    pub fn primitive<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        if x < -one {
            return -one;
        }
        if x >= one {
            return one;
        }
        match self {
            SurrogateKind::ClipSte => x,
            SurrogateKind::ApproxSign2 => {
                let two = one + one;
                if x < T::zero() {
                    two * x + x * x
                } else {
                    two * x - x * x
                }
            }
            SurrogateKind::ApproxSign3 => {
                if x < T::zero() {
                    (x + one).powi(3) - one
                } else {
                    (x - one).powi(3) + one
                }
            }
        }
    }

    /// `F'(x)`. Intervals are half-open `[-1, 0)` and `[0, 1)`, so the knots
    /// take their right-hand branch.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        if x < -one || x >= one {
            return T::zero();
        }
        let two = one + one;
        let three = two + one;
        match self {
            SurrogateKind::ClipSte => {
                // box is open at -1
                if x > -one {
                    one
                } else {
                    T::zero()
                }
            }
            SurrogateKind::ApproxSign2 => {
                if x < T::zero() {
                    two + two * x
                } else {
                    two - two * x
                }
            }
            SurrogateKind::ApproxSign3 => {
                if x < T::zero() {
                    three * (x + one).powi(2)
                } else {
                    three * (x - one).powi(2)
                }
            }
        }
    }
}

/// Composite Simpson rule with `panels` (rounded up to even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + inner + f(b)) * h / 3.0
}

impl SurrogateKind {
    /// `∫|F - sign|` over `[-1, 1]`, integrated piecewise on each side of the
    /// jump at 0 (the integrand is polynomial on both).
    pub fn sign_gap_area(self, panels: usize) -> f64 {
        let gap = |x: f64| (self.primitive(x) - sign(x)).abs();
        // sign is -1 on [-1, 0); evaluate that side's right end as a limit
        let left = |x: f64| if x == 0.0 { (self.primitive(0.0f64) + 1.0).abs() } else { gap(x) };
        simpson(left, -1.0, 0.0, panels) + simpson(gap, 0.0, 1.0, panels)
    }
}

impl std::str::FromStr for SurrogateKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clip_ste" => Ok(SurrogateKind::ClipSte),
            "approx_sign2" => Ok(SurrogateKind::ApproxSign2),
            "approx_sign3" => Ok(SurrogateKind::ApproxSign3),
            other => Err(crate::Error::Config(format!("unknown surrogate `{other}`"))),
        }
    }
}

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}
