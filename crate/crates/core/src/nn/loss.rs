use ndarray::{Array2, Axis};

use crate::scalar::{lit, Scalar};

/// Row-wise softmax of `[batch, classes]` logits.
pub fn softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean categorical cross-entropy of softmax(logits) against integer class
/// targets, and its gradient with respect to the logits.
pub fn cross_entropy_with_logits<T: Scalar>(logits: &Array2<T>, targets: &[usize]) -> (T, Array2<T>) {
    let n = logits.nrows();
    assert_eq!(n, targets.len(), "one target per row");
    let probs = softmax(logits);
    let inv_n = T::one() / lit::<T>(n as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (i, (row, &t)) in logits.axis_iter(Axis(0)).zip(targets).enumerate() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        loss += lse - row[t];
        grad[[i, t]] -= T::one();
    }
    grad.mapv_inplace(|g| g * inv_n);
    (loss * inv_n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_predictions_cost_ln2_per_sample() {
        let logits = array![[0.0f64, 0.0], [3.0, 3.0]];
        let (loss, _) = cross_entropy_with_logits(&logits, &[0, 1]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let logits = array![[60.0f64, -60.0], [-60.0, 60.0]];
        let (loss, grad) = cross_entropy_with_logits(&logits, &[0, 1]);
        assert!(loss < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = array![[0.3f64, -1.2], [2.0, 0.5], [-0.4, -0.1]];
        let targets = [1, 0, 0];
        let (_, grad) = cross_entropy_with_logits(&logits, &targets);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut p = logits.clone();
                let mut m = logits.clone();
                p[[i, j]] += eps;
                m[[i, j]] -= eps;
                let numeric =
                    (cross_entropy_with_logits(&p, &targets).0 - cross_entropy_with_logits(&m, &targets).0) / (2.0 * eps);
                assert!((numeric - grad[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&array![[1000.0f32, 999.0], [-5.0, 5.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
