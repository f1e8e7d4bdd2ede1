//! Softmax and mean cross-entropy over a batch of logits.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut probs = Vec::with_capacity(n * k);
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = probs.len();
        let mut z = 0.0;
        for &v in row {
            let e = libm::exp(v - m);
            z += e;
            probs.push(e);
        }
        for p in &mut probs[start..] {
            *p /= z;
        }
    }
    Tensor::new(alloc::vec![n, k], probs)
}

/// Returns `(mean loss, probabilities)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy labels",
            left: logits.shape().to_vec(),
            right: alloc::vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let probs = softmax(logits)?;
    // log-sum-exp form keeps the loss finite when a probability underflows
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
        total += lse - row[label];
    }
    Ok((total / n as f64, probs))
}

/// `(probs − onehot(labels)) / N`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = probs.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy_backward",
            left: probs.shape().to_vec(),
            right: alloc::vec![labels.len()],
        });
    }
    let mut g = probs.scale(1.0 / n as f64);
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        g.data_mut()[i * k + label] -= 1.0 / n as f64;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits() {
        let (loss, probs) = softmax_cross_entropy(&Tensor::zeros(&[1, 2]), &[1]).unwrap();
        assert_eq!(probs.data(), &[0.5, 0.5]);
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        assert_eq!(
            softmax_cross_entropy(&Tensor::zeros(&[1, 2]), &[2]).unwrap_err(),
            Error::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn huge_logits_stay_finite() {
        let logits = Tensor::matrix(&[&[1000.0, -1000.0]]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.is_finite() && (loss - 2000.0).abs() < 1e-9);
        assert!(probs.all_finite());
    }

    proptest! {
        #[test]
        fn shift_invariant_and_normalized(row in proptest::collection::vec(-10.0f64..10.0, 2..6), c in -50.0f64..50.0) {
            let k = row.len();
            let x = Tensor::new(vec![1, k], row).unwrap();
            let p = softmax(&x).unwrap();
            let q = softmax(&x.map(|v| v + c)).unwrap();
            prop_assert!(p.max_abs_diff(&q).unwrap() <= 1e-12);
            prop_assert!((p.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
