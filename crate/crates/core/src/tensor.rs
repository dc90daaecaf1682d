//! Dense real tensors and the reference convolution.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Feature maps are NCHW, kernels OIHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The 64-bit reference tensor type.
pub type RealTensor = Tensor<f64>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Tensor { shape, data }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as NCHW.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(dim_err!("expected a 4-D tensor, got shape {:?}", other)),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[r, c] => Ok([r, c]),
            other => Err(dim_err!("expected a 2-D tensor, got shape {:?}", other)),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(dim_err!("expected shape {:?}, got {:?}", shape, self.shape));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Slice of samples `[start, end)` along the leading axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| dim_err!("scalar has no batch axis"))?;
        if start > end || end > n {
            return Err(dim_err!("batch range {start}..{end} out of 0..{n}"));
        }
        let per = self.data.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor { shape, data: self.data[start * per..end * per].to_vec() })
    }

    /// Gathers samples by index along the leading axis.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| dim_err!("scalar has no batch axis"))?;
        let per = self.data.len() / n.max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= n {
                return Err(dim_err!("sample index {i} out of 0..{n}"));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }
}

/// Output spatial size of a convolution or pooling window; `None` if non-positive.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

pub(crate) fn conv_geometry(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Result<[usize; 4]> {
    let (&[n, c, h, w], &[o, ic, kh, kw]) = (input, weight) else {
        return Err(dim_err!("conv expects NCHW input and OIHW weight, got {input:?} / {weight:?}"));
    };
    if c != ic {
        return Err(dim_err!("conv input has {c} channels, weight expects {ic}"));
    }
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok([n, o, ho, wo]),
        _ => Err(dim_err!(
            "conv of {h}x{w} with {kh}x{kw} kernel, stride {stride}, pad {pad} has empty output"
        )),
    }
}

/// Direct cross-correlation with zero padding.
///
/// Taps are accumulated in a fixed order (input channel, then kernel row, then
/// kernel column) so results are reproducible bit for bit.
pub fn real_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, o, ho, wo] = conv_geometry(input.shape(), weight.shape(), stride, pad)?;
    let [_, c, h, w] = input.dims4()?;
    let [_, _, kh, kw] = weight.dims4()?;
    let x = input.data();
    let k = weight.data();
    let mut out = Vec::with_capacity(n * o * ho * wo);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oc * c + ic) * kh + ky) * kw + kx];
                                acc = acc + xv * kv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(RealTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(RealTensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = RealTensor::from_fn(vec![2, 1, 4, 5], |i| i as f64 - 7.5);
        let k = RealTensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(real_conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn zero_weight_gives_zero_output() {
        let x = RealTensor::from_fn(vec![1, 2, 5, 5], |i| (i as f64).cos());
        let k = RealTensor::zeros(vec![3, 2, 3, 3]);
        let y = real_conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn known_5x5_input_with_3x3_kernel() {
        // input 0..25 row-major, kernel 1..9; values computed by hand
        let x = RealTensor::from_fn(vec![1, 1, 5, 5], |i| i as f64);
        let k = RealTensor::from_fn(vec![1, 1, 3, 3], |i| (i + 1) as f64);
        let y = real_conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // top-left window [0 1 2; 5 6 7; 10 11 12] . [1..9] = 366
        assert_eq!(y.data()[0], 366.0);
        // each step right adds sum(1..9)=45, each step down adds 5*45
        assert_eq!(y.data()[1], 411.0);
        assert_eq!(y.data()[3], 366.0 + 225.0);
        assert_eq!(y.data()[8], 366.0 + 2.0 * 45.0 + 2.0 * 225.0);

        let y = real_conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // corner window covers x[0,0],x[0,1],x[1,0],x[1,1] with kernel taps 5,6,8,9
        assert_eq!(y.data()[0], 0.0 * 5.0 + 1.0 * 6.0 + 5.0 * 8.0 + 6.0 * 9.0);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = RealTensor::zeros(vec![1, 2, 4, 4]);
        let k = RealTensor::zeros(vec![1, 3, 3, 3]);
        assert!(matches!(real_conv2d(&x, &k, 1, 0), Err(crate::Error::Dimension(_))));
        let k = RealTensor::zeros(vec![1, 2, 5, 5]);
        assert!(real_conv2d(&x, &k, 1, 0).is_err());
    }
}
