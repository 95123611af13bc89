//! Central finite differences, used to check analytic gradients.
//!
//! These helpers only ever evaluate the forward function; they never touch
//! a tape's backward pass.

use super::Tensor;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
