use crate::engine::tensor::Tensor;

/// Probabilities below this are clamped before the log to avoid −∞ on
/// confident wrong predictions.
pub const LOG_LOSS_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood over a `[n, C]` probability batch.
/// `labels` are 0-based class indices. Returns the loss and its gradient
/// with respect to the probabilities.
pub fn multinomial_logistic(probs: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = probs.shape()[0];
    let c = probs.shape()[1];
    assert_eq!(labels.len(), n, "one label per row");
    let mut grad = Tensor::zeros(&[n, c]);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = labels[i];
        assert!(y < c, "label {y} out of range for {c} classes");
        let p = probs.at(i, y).max(LOG_LOSS_FLOOR);
        loss -= p.ln();
        grad.set(i, y, -inv_n / p);
    }
    (loss * inv_n, grad)
}

/// Fraction of rows whose argmax (lowest index on ties) differs from the
/// label.
pub fn top1_error(probs: &Tensor, labels: &[usize]) -> f64 {
    topk_error(probs, labels, 1)
}

/// Fraction of rows whose label is not among the k largest probabilities.
/// Ties are broken toward lower indices.
pub fn topk_error(probs: &Tensor, labels: &[usize], k: usize) -> f64 {
    let n = probs.shape()[0];
    let c = probs.shape()[1];
    assert_eq!(labels.len(), n);
    let mut wrong = 0usize;
    for i in 0..n {
        let row = probs.row(i);
        let py = row[labels[i]];
        // Rank of the label: entries strictly greater, plus equal entries at
        // lower indices.
        let mut ahead = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > py || (v == py && j < labels[i]) {
                ahead += 1;
            }
        }
        if ahead >= k.min(c) {
            wrong += 1;
        }
    }
    wrong as f64 / n as f64
}
