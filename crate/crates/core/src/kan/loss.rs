use super::{shape_err, KanError};
use ndarray::{Array2, ArrayView2};

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss and the row-wise softmax probabilities. The gradient with
/// respect to the logits is `(probabilities - onehot) / B`.
pub fn softmax_cross_entropy(
    logits: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), KanError> {
    let (batch, classes) = logits.dim();
    if labels.len() != batch {
        return Err(shape_err(format!("{batch} labels"), labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(KanError::LabelOutOfRange { label, classes });
    }
    let mut probs = Array2::zeros((batch, classes));
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for c in 0..classes {
            let e = (row[c] - max).exp();
            probs[[b, c]] = e;
            denom += e;
        }
        for c in 0..classes {
            probs[[b, c]] /= denom;
        }
        total += denom.ln() - (row[label] - max);
    }
    let loss = if batch == 0 { 0.0 } else { total / batch as f64 };
    Ok((loss, probs))
}

/// `(probabilities - onehot) / B`.
pub(crate) fn cross_entropy_grad(probs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let batch = probs.nrows().max(1) as f64;
    let mut grad = probs.clone();
    for (b, &label) in labels.iter().enumerate() {
        grad[[b, label]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / batch);
    grad
}

/// Mean over all entries of the squared error, with its gradient.
pub fn mse_loss(
    predictions: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>), KanError> {
    if predictions.dim() != targets.dim() {
        return Err(shape_err(
            format!("{:?}", predictions.dim()),
            format!("{:?}", targets.dim()),
        ));
    }
    let n = predictions.len().max(1) as f64;
    let diff = &predictions - &targets;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.mapv(|d| 2.0 * d / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, probs) = softmax_cross_entropy(array![[0.5, 0.5, 0.5, 0.5]].view(), &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_logits_are_stable() {
        let (loss, probs) = softmax_cross_entropy(array![[1e4, 0.0]].view(), &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(probs.iter().all(|p| p.is_finite()));
        let (loss, _) = softmax_cross_entropy(array![[-1e4, 1e4]].view(), &[0]).unwrap();
        assert!((loss - 2e4).abs() < 1e-8);
    }

    #[test]
    fn hand_computed_case() {
        let (loss, _) = softmax_cross_entropy(array![[1.0, 2.0, 3.0]].view(), &[2]).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e.powi(3) / (e + e * e + e.powi(3))).ln();
        assert!((loss - expected).abs() < 1e-14);
        assert!((loss - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn label_checks() {
        assert_eq!(
            softmax_cross_entropy(array![[1.0, 2.0]].view(), &[2]),
            Err(KanError::LabelOutOfRange { label: 2, classes: 2 })
        );
        assert!(softmax_cross_entropy(array![[1.0, 2.0]].view(), &[0, 1]).is_err());
    }

    #[test]
    fn gradient_matches_difference() {
        let logits = array![[0.3, -1.2, 2.0], [1.0, 0.0, -0.5]];
        let labels = [1, 0];
        let (_, probs) = softmax_cross_entropy(logits.view(), &labels).unwrap();
        let grad = cross_entropy_grad(&probs, &labels);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fd = (softmax_cross_entropy(p.view(), &labels).unwrap().0
                    - softmax_cross_entropy(m.view(), &labels).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mse_basics() {
        let (loss, grad) = mse_loss(array![[1.0], [3.0]].view(), array![[0.0], [1.0]].view()).unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(grad, array![[1.0], [2.0]]);
    }

    proptest::proptest! {
        #[test]
        fn rows_are_probability_vectors(
            logits in proptest::collection::vec(-1e4f64..1e4, 12)
        ) {
            let m = Array2::from_shape_vec((3, 4), logits).unwrap();
            let (_, probs) = softmax_cross_entropy(m.view(), &[0, 1, 3]).unwrap();
            for row in probs.rows() {
                proptest::prop_assert!(row.iter().all(|&p| p >= 0.0));
                proptest::prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
