use crate::nn::Scalar;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient with respect to `probs`.
pub fn bce_loss<S: Scalar>(probs: &[S], targets: &[S]) -> (S, Vec<S>) {
    assert_eq!(probs.len(), targets.len(), "bce: length mismatch");
    let n = probs.len().max(1) as f64;
    let lo = S::from_f64(BCE_CLAMP);
    let hi = S::one() - lo;
    let inv_n = S::from_f64(1.0 / n);
    let mut loss = S::zero();
    let grad = probs
        .iter()
        .zip(targets)
        .map(|(&y, &t)| {
            let y = y.max(lo).min(hi);
            loss -= t * y.ln() + (S::one() - t) * (S::one() - y).ln();
            -inv_n * (t / y - (S::one() - t) / (S::one() - y))
        })
        .collect();
    (loss * inv_n, grad)
}
