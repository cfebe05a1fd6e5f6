//! Softmax cross-entropy over logits in `(classes, batch)` layout.

use ndarray::Array2;

/// Loss, logit gradient, and top-1 hit count for one batch.
pub struct LossOutput {
    /// Mean negative log-likelihood over the batch, accumulated in f64.
    pub loss: f64,
    /// `d loss / d logits`, already divided by the batch size.
    pub dlogits: Array2<f32>,
    /// Samples whose argmax logit equals the label (ties break to the
    /// lowest class index).
    pub correct: usize,
}

/// Numerically stable softmax cross-entropy with mean reduction.
///
/// `logits` is `(classes, batch)`; `labels[i] < classes` is required.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[u32]) -> LossOutput {
    let (d, n) = logits.dim();
    assert_eq!(n, labels.len(), "batch size mismatch");
    assert!(n > 0, "empty batch");
    let mut dlogits = Array2::<f32>::zeros((d, n));
    let mut loss = 0f64;
    let mut correct = 0usize;
    let inv_n = 1.0 / n as f32;
    for i in 0..n {
        let y = labels[i] as usize;
        assert!(y < d, "label {y} out of range for {d} classes");
        let col = logits.column(i);
        let mut max = f64::NEG_INFINITY;
        let mut argmax = 0usize;
        for (j, &v) in col.iter().enumerate() {
            if (v as f64) > max {
                max = v as f64;
                argmax = j;
            }
        }
        if argmax == y {
            correct += 1;
        }
        let mut denom = 0f64;
        for &v in col.iter() {
            denom += (v as f64 - max).exp();
        }
        loss += denom.ln() + max - logits[[y, i]] as f64;
        for j in 0..d {
            let p = ((logits[[j, i]] as f64 - max).exp() / denom) as f32;
            dlogits[[j, i]] = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    LossOutput {
        loss: loss / n as f64,
        dlogits,
        correct,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_log_d() {
        let logits = Array2::<f32>::zeros((10, 4));
        let out = softmax_cross_entropy(&logits, &[0, 3, 7, 9]);
        assert!((out.loss - (10f64).ln()).abs() < 1e-9);
        // Ties break to class 0, so only the first sample counts as correct.
        assert_eq!(out.correct, 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::stream(0, "loss_test", 0);
        let mut logits = Array2::from_shape_fn((5, 3), |_| r.random_range(-2.0..2.0f32));
        let labels = [2u32, 0, 4];
        let out = softmax_cross_entropy(&logits, &labels);
        let eps = 1e-3f32;
        for j in 0..5 {
            for i in 0..3 {
                let orig = logits[[j, i]];
                logits[[j, i]] = orig + eps;
                let lp = softmax_cross_entropy(&logits, &labels).loss;
                logits[[j, i]] = orig - eps;
                let lm = softmax_cross_entropy(&logits, &labels).loss;
                logits[[j, i]] = orig;
                let numeric = (lp - lm) / (2.0 * eps as f64);
                let analytic = out.dlogits[[j, i]] as f64;
                assert!(
                    (analytic - numeric).abs() < 1e-4,
                    "({j},{i}): {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradient_columns_sum_to_zero() {
        let mut r = rng::stream(1, "loss_test", 0);
        let logits = Array2::from_shape_fn((7, 4), |_| r.random_range(-3.0..3.0f32));
        let out = softmax_cross_entropy(&logits, &[1, 2, 3, 6]);
        for i in 0..4 {
            let s: f32 = out.dlogits.column(i).sum();
            assert!(s.abs() < 1e-6, "column {i} sums to {s}");
        }
    }

    #[test]
    fn perfect_prediction_counts_as_correct() {
        let mut logits = Array2::<f32>::zeros((3, 2));
        logits[[1, 0]] = 10.0;
        logits[[2, 1]] = 10.0;
        let out = softmax_cross_entropy(&logits, &[1, 2]);
        assert_eq!(out.correct, 2);
        assert!(out.loss < 1e-3);
    }
}
