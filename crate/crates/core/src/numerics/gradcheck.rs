//! Finite-difference gradient checking.
//!
//! The analytic gradients from [`super::Tape::backward`] are verified against
//! central differences: numeric_i = (f(x + h e_i) - f(x - h e_i)) / 2h. The
//! comparison uses the usual mixed tolerance |a - n| <= atol + rtol * |n| so
//! near-zero gradients are judged absolutely and large ones relatively.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Worst-case scaled error max_i |a_i - n_i| / (atol + rtol * |n_i|).
/// A value <= 1.0 means every coordinate is within tolerance.
pub fn max_scaled_error(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (atol + rtol * n.abs()))
        .fold(0.0, f64::max)
}

/// Compare gradients, returning a message naming the worst coordinate on
/// failure.
pub fn check(
    analytic: &[f64],
    numeric: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<(), String> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = (0usize, 0.0f64);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scaled = (a - n).abs() / (atol + rtol * n.abs());
        if scaled > worst.1 {
            worst = (i, scaled);
        }
    }
    if worst.1 <= 1.0 {
        Ok(())
    } else {
        let i = worst.0;
        Err(format!(
            "gradient mismatch at index {i}: analytic {} vs numeric {} (scaled error {:.3})",
            analytic[i], numeric[i], worst.1
        ))
    }
}
