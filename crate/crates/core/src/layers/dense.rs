use crate::error::{dim_err, Result};
use crate::scalar::{Scalar, Strides};
use crate::tensor::Tensor;

/// `y = x W^T + b` with `x: N x I`, `W: O x I`, `b: O`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, i] = x.dims2()?;
    let [o, wi] = weight.dims2()?;
    if i != wi || bias.len() != o {
        return Err(dim_err!(
            "linear layer {o}x{wi} (bias {}) applied to {n}x{i} input",
            bias.len()
        ));
    }
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(bias.data());
    }
    T::gemm(
        n,
        i,
        o,
        T::one(),
        x.data(),
        Strides::row_major(i),
        weight.data(),
        Strides::transposed(i),
        T::one(),
        &mut y,
        Strides::row_major(o),
    );
    Tensor::new(vec![n, o], y)
}

/// Returns `(dL/dx, dL/dW, dL/db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, i] = x.dims2()?;
    let [o, _] = weight.dims2()?;
    grad_out.expect_shape(&[n, o])?;
    let gy = grad_out.data();

    let mut gx = vec![T::zero(); n * i];
    T::gemm(n, o, i, T::one(), gy, Strides::row_major(o), weight.data(), Strides::row_major(i), T::zero(), &mut gx, Strides::row_major(i));
    let mut gw = vec![T::zero(); o * i];
    T::gemm(o, n, i, T::one(), gy, Strides::transposed(o), x.data(), Strides::row_major(i), T::zero(), &mut gw, Strides::row_major(i));
    let mut gb = vec![T::zero(); o];
    for row in gy.chunks(o) {
        for (a, &g) in gb.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    Ok((
        Tensor::new(vec![n, i], gx)?,
        Tensor::new(vec![o, i], gw)?,
        Tensor::new(vec![o], gb)?,
    ))
}
