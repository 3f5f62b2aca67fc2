use crate::error::{Error, Result};
use crate::numerics::{Differentiable, Tensor};
use crate::scalar::Scalar;

/// Mean masked softmax cross-entropy.
///
/// `loss = mean over rows with mask[i] of -log softmax(logits[i])[labels[i]]`.
/// The gradient has zero rows where the mask is false.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[i64],
    mask: &[bool],
) -> Result<(T, Tensor<T>)> {
    let (m, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != m || mask.len() != m {
        return Err(Error::InvalidArgument(format!(
            "softmax_cross_entropy: {m} rows but {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::InvalidArgument(
            "softmax_cross_entropy: mask selects no rows".into(),
        ));
    }
    for (i, (&l, &on)) in labels.iter().zip(mask).enumerate() {
        if on && (l < 0 || l as usize >= k) {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: label {l} at row {i} outside 0..{k}"
            )));
        }
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&[m, k]);
    for (i, row) in logits.data().chunks(k).enumerate() {
        if !mask[i] {
            continue;
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        let label = labels[i] as usize;
        loss += (log_z - row[label]) * inv;
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            *gj = (p - onehot) * inv;
        }
    }
    Ok((loss, grad))
}

/// Inputs `[logits]`; output is the scalar loss as a `[1]` tensor.
#[derive(Clone, Debug)]
pub struct SoftmaxCrossEntropyOp {
    pub labels: Vec<i64>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> Differentiable<T> for SoftmaxCrossEntropyOp {
    fn name(&self) -> &str {
        "softmax_cross_entropy"
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(softmax_cross_entropy(&inputs[0], &self.labels, &self.mask)?.0))
    }
    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, g) = softmax_cross_entropy(&inputs[0], &self.labels, &self.mask)?;
        Ok(vec![g.scale(cot.data()[0])])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln7() {
        let logits = Tensor::<f64>::full(&[5, 7], 0.3);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 4], &[true; 5]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((loss - 1.945910).abs() < 1e-6);
    }

    #[test]
    fn dominant_correct_logit_gives_near_zero_loss() {
        let mut logits = Tensor::<f64>::zeros(&[2, 7]);
        logits.data_mut()[3] = 30.0;
        logits.data_mut()[7 + 6] = 30.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[3, 6], &[true, true]).unwrap();
        assert!(loss <= 1e-9, "loss {loss}");
    }

    #[test]
    fn masked_rows_get_zero_gradient_and_rows_sum_to_zero() {
        let logits = Tensor::<f64>::from_fn(&[3, 7], |i| (i as f64 * 0.77).sin());
        let (_, g) = softmax_cross_entropy(&logits, &[1, -1, 6], &[true, false, true]).unwrap();
        assert!(g.data()[7..14].iter().all(|&v| v == 0.0));
        for row in g.data().chunks(7) {
            assert!(row.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_empty_mask_and_bad_labels() {
        let logits = Tensor::<f64>::zeros(&[2, 7]);
        assert!(softmax_cross_entropy(&logits, &[0, 0], &[false, false]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 7], &[true, true]).is_err());
        // out-of-range labels are fine where masked out
        assert!(softmax_cross_entropy(&logits, &[0, -1], &[true, false]).is_ok());
    }
}
