use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// class probabilities (kept for the backward pass).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, k] = logits.dims2()?;
    if labels.len() != n {
        return Err(dim_err!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(dim_err!("label {bad} out of range for {k} classes"));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss = loss + log_z - row[label];
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
    }
    Ok((loss / T::from_f64(n as f64), Tensor::new(vec![n, k], probs)?))
}

/// Gradient of the mean loss w.r.t. the logits, scaled by `upstream`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Tensor<T> {
    let [n, k] = probs.dims2().expect("probabilities are 2-D");
    let scale = upstream / T::from_f64(n as f64);
    let mut g = probs.clone();
    for (b, &label) in labels.iter().enumerate() {
        let row = &mut g.data_mut()[b * k..(b + 1) * k];
        row[label] = row[label] - T::one();
        for v in row {
            *v = *v * scale;
        }
    }
    g
}
