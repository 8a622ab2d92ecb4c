/// Probability clamp used inside the logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy over all entries.
pub fn bce_loss(scores: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(scores.len(), targets.len());
    let total: f64 = scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
        })
        .sum();
    total / scores.len() as f64
}

/// Derivative of [`bce_loss`] with respect to each score. Entries whose
/// score sits on the clamp have zero gradient.
pub fn bce_grad(scores: &[f64], targets: &[f64]) -> Vec<f64> {
    assert_eq!(scores.len(), targets.len());
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            if s <= BCE_EPS || s >= 1.0 - BCE_EPS {
                0.0
            } else {
                (-t / s + (1.0 - t) / (1.0 - s)) / n
            }
        })
        .collect()
}
