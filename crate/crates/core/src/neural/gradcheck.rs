//! Central finite-difference reference for network gradients.

use rand_chacha::ChaCha8Rng;

use super::loss::bce_loss;
use super::model::{Mode, Model};
use super::tensor::Tensor;
use super::train::loss_and_grad;

fn loss_at(model: &Model, x: &Tensor, targets: &[f64], rng: Option<&ChaCha8Rng>) -> (f64, Vec<bool>) {
    let mut local = rng.cloned();
    let mode = match local.as_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let trace = model.forward(x, mode).expect("valid input");
    (bce_loss(trace.output(), targets), trace.relu_pattern(&model.spec().layers))
}

/// Numerical gradient of the mean BCE loss for every weight, by central
/// differences with step `h`. When `rng` is given the forward pass runs in
/// training mode with a fresh clone of it each time, so dropout masks are
/// identical across evaluations. Entries whose probes flip any ReLU are
/// left as NaN, since the difference quotient is meaningless there.
pub fn numeric_gradients(model: &Model, x: &Tensor, targets: &[f64], h: f64, rng: Option<&ChaCha8Rng>) -> Vec<Vec<f64>> {
    let mut probe = model.clone();
    let (_, base) = loss_at(model, x, targets, rng);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (t, &n) in sizes.iter().enumerate() {
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + h;
            let (up, pu) = loss_at(&probe, x, targets, rng);
            probe.params_mut()[t][i] = orig - h;
            let (down, pd) = loss_at(&probe, x, targets, rng);
            probe.params_mut()[t][i] = orig;
            *gi = if pu == base && pd == base { (up - down) / (2.0 * h) } else { f64::NAN };
        }
        out.push(g);
    }
    out
}

/// Largest relative error between analytic and numeric gradients, with
/// `floor` guarding the denominator for near-zero entries. Kinked entries
/// are skipped.
pub fn max_relative_error(model: &Model, x: &Tensor, targets: &[f64], h: f64, floor: f64, rng: Option<&ChaCha8Rng>) -> f64 {
    let mut local = rng.cloned();
    let mode = match local.as_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let (_, analytic) = loss_and_grad(model, x, targets, mode).expect("valid input");
    let numeric = numeric_gradients(model, x, targets, h, rng);
    analytic
        .0
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .filter(|(_, n)| !n.is_nan())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
