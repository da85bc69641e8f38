//! Finite-difference gradient checking.
//!
//! Central differences over a forward-only closure; never touches the tape
//! or any backward rule, so it stays an independent oracle for them. Run in
//! f64: single precision drowns the h^2 truncation error in rounding noise.

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// `f` must be a pure function of its argument; it is called 2*len(x) times.
pub fn central_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst mismatch between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
}

/// Compare gradients elementwise with `|a - n| <= atol + rtol * |n|`.
/// Returns the worst offending element, or `None` when all pass.
pub fn compare_grads(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> Option<GradMismatch> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst: Option<GradMismatch> = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs_err = (a - n).abs();
        if abs_err > atol + rtol * n.abs() {
            let excess = abs_err - (atol + rtol * n.abs());
            if worst.map_or(true, |w| excess > w.abs_err - (atol + rtol * w.numeric.abs())) {
                worst = Some(GradMismatch { index: i, analytic: a, numeric: n, abs_err });
            }
        }
    }
    worst
}

/// Panic with a readable report unless the gradients agree.
pub fn assert_grads_close(name: &str, analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) {
    if let Some(m) = compare_grads(analytic, numeric, rtol, atol) {
        panic!(
            "{name}: gradient mismatch at index {}: analytic {} vs numeric {} (abs err {:.3e}, rtol {rtol}, atol {atol})",
            m.index, m.analytic, m.numeric, m.abs_err
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        // f(x) = x0^2 + 3*x1, df = [2*x0, 3]
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_diff_grad(f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn compare_grads_flags_mismatch() {
        assert!(compare_grads(&[1.0, 2.0], &[1.0, 2.5], 1e-3, 1e-6).is_some());
        assert!(compare_grads(&[1.0, 2.0], &[1.0, 2.0 + 1e-7], 1e-3, 1e-6).is_none());
    }
}
