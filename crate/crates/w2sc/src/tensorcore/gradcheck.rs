//! Central finite-difference gradient oracle. Independent of the tape's
//! backward pass: it only re-evaluates forward closures.

/// Central differences: df/dx_i ≈ (f(x+he_i) - f(x-he_i)) / 2h.
pub fn finite_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Norm-based relative error between two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-8)
}
