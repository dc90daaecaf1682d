//! Floating-point element types used by the training graph.
//!
//! Oracle and export-verification paths run in `f64`; training runs in `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Row/column strides of a matrix view, in elements.
#[derive(Clone, Copy, Debug)]
pub struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Strides { row: cols as isize, col: 1 }
    }

    /// View of a row-major `rows x cols` matrix as its transpose.
    pub const fn transposed(cols: usize) -> Self {
        Strides { row: 1, col: cols as isize }
    }
}

pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// `c = alpha * a(m x k) * b(k x n) + beta * c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        beta: Self,
        c: &mut [Self],
        sc: Strides,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, s: Strides, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(s.row >= 0 && s.col >= 0, "{what}: negative strides unsupported");
    let last = (rows - 1) * s.row as usize + (cols - 1) * s.col as usize;
    assert!(last < len, "{what}: view {rows}x{cols} exceeds buffer of {len}");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: Strides,
                b: &[Self],
                sb: Strides,
                beta: Self,
                c: &mut [Self],
                sc: Strides,
            ) {
                check_extent(a.len(), m, k, sa, "gemm lhs");
                check_extent(b.len(), k, n, sb, "gemm rhs");
                check_extent(c.len(), m, n, sc, "gemm out");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above and `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.row,
                        sa.col,
                        b.as_ptr(),
                        sb.row,
                        sb.col,
                        beta,
                        c.as_mut_ptr(),
                        sc.row,
                        sc.col,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![1.0; m * n];
        f64::gemm(
            m,
            k,
            n,
            1.0,
            &a,
            Strides::row_major(k),
            &b,
            Strides::row_major(n),
            0.0,
            &mut c,
            Strides::row_major(n),
        );
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposed_view() {
        // a is stored as k x m, used as its transpose
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3 storage -> 3x2 view
        let b = [1.0f32, 1.0];
        let mut c = [0.0f32; 3];
        f32::gemm(
            3,
            2,
            1,
            1.0,
            &a,
            Strides::transposed(3),
            &b,
            Strides::row_major(1),
            0.0,
            &mut c,
            Strides::row_major(1),
        );
        assert_eq!(c, [5.0, 7.0, 9.0]);
    }
}
