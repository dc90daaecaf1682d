//! Training-path convolution: per-sample im2col followed by a GEMM.
//!
//! Samples are processed independently and weight gradients are reduced over
//! fixed-size sample chunks in index order, so results do not depend on how
//! many worker threads rayon happens to use.

use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::{Scalar, Strides};
use crate::tensor::{conv_geometry, Tensor};

/// Samples per weight-gradient partial sum.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, Self)> {
        let [n, o, ho, wo] = conv_geometry(x.shape(), k.shape(), stride, pad)?;
        let [_, c, h, w] = x.dims4()?;
        let [_, _, kh, kw] = k.dims4()?;
        Ok((n, Geometry { c, h, w, o, kh, kw, ho, wo, stride, pad }))
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in bounds.
    #[inline]
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        // largest ox with ox * s + kx - pad <= w - 1
        let hi = if self.w + pad > kx { ((self.w + pad - kx - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Calls `f(col_segment_start, input_start, lo, hi)` for every
    /// `(tap, output row)` pair: columns `lo..hi` of that row read the input
    /// at `input_start + (ox - lo) * stride`. Rows falling outside the input
    /// get `lo == hi`.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let p = self.p();
        for ic in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in 0..self.ho {
                        let seg = row * p + oy * self.wo;
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            f(seg, 0, 0, 0);
                            continue;
                        }
                        let start = (ic * self.h + iy as usize) * self.w + lo * self.stride + kx - self.pad;
                        f(seg, start, lo, hi);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (wo, s) = (self.wo, self.stride);
        self.for_each_segment(|seg, start, lo, hi| {
            let out = &mut cols[seg..seg + wo];
            out[..lo].fill(T::zero());
            out[hi..].fill(T::zero());
            if s == 1 {
                out[lo..hi].copy_from_slice(&x[start..start + hi - lo]);
            } else {
                for (j, o) in out[lo..hi].iter_mut().enumerate() {
                    *o = x[start + j * s];
                }
            }
        });
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let s = self.stride;
        self.for_each_segment(|seg, start, lo, hi| {
            let src = &cols[seg + lo..seg + hi];
            if s == 1 {
                for (g, &c) in gx[start..start + hi - lo].iter_mut().zip(src) {
                    *g = *g + c;
                }
            } else {
                for (j, &c) in src.iter().enumerate() {
                    gx[start + j * s] = gx[start + j * s] + c;
                }
            }
        });
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g) = Geometry::new(x, weight, stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); n * g.o * p];
    let xd = x.data();
    let wd = weight.data();
    out.par_chunks_mut(g.o * p).enumerate().for_each_init(
        || vec![T::zero(); k * p],
        |cols, (b, yb)| {
            g.im2col(&xd[b * g.in_len()..(b + 1) * g.in_len()], cols);
            T::gemm(
                g.o,
                k,
                p,
                T::one(),
                wd,
                Strides::row_major(k),
                cols,
                Strides::row_major(p),
                T::zero(),
                yb,
                Strides::row_major(p),
            );
        },
    );
    Tensor::new(vec![n, g.o, g.ho, g.wo], out)
}

/// Returns `(dL/dx, dL/dweight)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, g) = Geometry::new(x, weight, stride, pad)?;
    grad_out.expect_shape(&[n, g.o, g.ho, g.wo])?;
    let (k, p, il) = (g.k(), g.p(), g.in_len());
    let xd = x.data();
    let wd = weight.data();
    let gy = grad_out.data();
    let ol = g.o * p;

    let mut gx = vec![T::zero(); n * il];
    let partials: Vec<Vec<T>> = gx
        .par_chunks_mut(GRAD_CHUNK * il)
        .enumerate()
        .map(|(chunk, gx_chunk)| {
            let mut cols = vec![T::zero(); k * p];
            let mut gw = vec![T::zero(); g.o * k];
            for (j, gxb) in gx_chunk.chunks_mut(il).enumerate() {
                let b = chunk * GRAD_CHUNK + j;
                let gyb = &gy[b * ol..(b + 1) * ol];
                g.im2col(&xd[b * il..(b + 1) * il], &mut cols);
                // gw += gy_b (o x p) * cols^T (p x k)
                T::gemm(
                    g.o,
                    p,
                    k,
                    T::one(),
                    gyb,
                    Strides::row_major(p),
                    &cols,
                    Strides::transposed(p),
                    T::one(),
                    &mut gw,
                    Strides::row_major(k),
                );
                // dcols = w^T (k x o) * gy_b (o x p)
                T::gemm(
                    k,
                    g.o,
                    p,
                    T::one(),
                    wd,
                    Strides::transposed(k),
                    gyb,
                    Strides::row_major(p),
                    T::zero(),
                    &mut cols,
                    Strides::row_major(p),
                );
                g.col2im_add(&cols, gxb);
            }
            gw
        })
        .collect();

    let mut gw = vec![T::zero(); g.o * k];
    for part in &partials {
        for (a, &b) in gw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(weight.shape().to_vec(), gw)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::real_conv2d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = random(vec![3, 4, 7, 6], &mut rng);
            let w = random(vec![5, 4, 3, 3], &mut rng);
            let fast = conv2d_forward(&x, &w, stride, pad).unwrap();
            let slow = real_conv2d(&x, &w, stride, pad).unwrap();
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn odd_geometries_match_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(h, w, k, stride, pad) in &[(5, 4, 3, 3, 2), (2, 3, 3, 1, 2), (7, 7, 1, 2, 0), (4, 5, 3, 2, 3), (1, 1, 3, 1, 1)] {
            let x = random(vec![2, 3, h, w], &mut rng);
            let wt = random(vec![2, 3, k, k], &mut rng);
            let fast = conv2d_forward(&x, &wt, stride, pad).unwrap();
            let slow = real_conv2d(&x, &wt, stride, pad).unwrap();
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{h}x{w} k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x, w), g> must equal <x, dx> and <w, dw> for a linear map
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };
        for &(stride, pad) in &[(2, 1), (1, 1), (1, 0), (2, 2)] {
            let x = random(vec![11, 3, 6, 7], &mut rng);
            let w = random(vec![4, 3, 3, 3], &mut rng);
            let y = conv2d_forward(&x, &w, stride, pad).unwrap();
            let gy = random(y.shape().to_vec(), &mut rng);
            let (gx, gw) = conv2d_backward(&x, &w, &gy, stride, pad).unwrap();
            let lhs = dot(&y, &gy);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - dot(&w, &gw)).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }
}
