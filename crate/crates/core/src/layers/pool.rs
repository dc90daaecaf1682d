use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output size of a ceil-mode pooling window without padding.
pub fn pool_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    if input <= kernel {
        1
    } else {
        (input - kernel).div_ceil(stride) + 1
    }
}

fn windows(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> (usize, usize, impl Fn(usize, usize) -> (usize, usize, usize, usize)) {
    let (ho, wo) = (pool_out_dim(h, kernel, stride), pool_out_dim(w, kernel, stride));
    let bounds = move |oy: usize, ox: usize| {
        let (y0, x0) = (oy * stride, ox * stride);
        (y0, (y0 + kernel).min(h), x0, (x0 + kernel).min(w))
    };
    (ho, wo, bounds)
}

/// Average pooling in ceil mode; partial windows at the border average only
/// the in-bounds elements.
pub fn avg_pool2d_forward<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if kernel == 0 || stride == 0 {
        return Err(dim_err!("pooling needs positive kernel and stride"));
    }
    let (ho, wo, bounds) = windows(h, w, kernel, stride);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (y0, y1, x0, x1) = bounds(oy, ox);
                let mut s = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s = s + xd[base + iy * w + ix];
                    }
                }
                out.push(s / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn avg_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(dim_err!("pooling expects NCHW, got {input_shape:?}"));
    };
    let (ho, wo, bounds) = windows(h, w, kernel, stride);
    grad_out.expect_shape(&[n, c, ho, wo])?;
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (y0, y1, x0, x1) = bounds(oy, ox);
                let g = gy[(plane * ho + oy) * wo + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        gx[base + iy * w + ix] = gx[base + iy * w + ix] + g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// NCHW -> NC mean over the spatial positions.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let out = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(dim_err!("pooling expects NCHW, got {input_shape:?}"));
    };
    grad_out.expect_shape(&[n, c])?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let mut gx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat(g * inv).take(h * w));
    }
    Tensor::new(input_shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_mode_dims() {
        assert_eq!(pool_out_dim(14, 2, 2), 7);
        assert_eq!(pool_out_dim(7, 2, 2), 4);
        assert_eq!(pool_out_dim(1, 2, 2), 1);
    }

    #[test]
    fn partial_border_window_averages_valid_elements() {
        let x = Tensor::<f64>::from_fn(vec![1, 1, 3, 3], |i| i as f64);
        let y = avg_pool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 3.5, 6.5, 8.0]);
    }

    #[test]
    fn pool_backward_distributes_evenly() {
        let g = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0);
        let gx = avg_pool2d_backward(&[1, 1, 3, 3], &g, 2, 2).unwrap();
        assert_eq!(gx.data(), &[0.25, 0.25, 0.5, 0.25, 0.25, 0.5, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn global_pool_means() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 2, 2], |i| i as f64);
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[1.5, 5.5]);
        let gx = global_avg_pool_backward(x.shape(), &Tensor::new(vec![1, 2], vec![4.0, 8.0]).unwrap()).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
