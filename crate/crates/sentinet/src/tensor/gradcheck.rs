//! Central finite-difference gradient checking.
//!
//! Used by the unit tests of every differentiable op and by the acceptance
//! suite; the step size and tolerance are pinned here so every check in the
//! repository agrees on what "gradients match" means.

use ndarray::ArrayD;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum allowed relative error against the finite-difference estimate.
pub const FD_RTOL: f64 = 1e-4;
/// Denominator floor; below this magnitude the comparison is absolute.
pub const FD_FLOOR: f64 = 1e-3;

/// Central finite-difference gradient of a scalar function at `x0`.
pub fn central_grad(f: &mut dyn FnMut(&ArrayD<f64>) -> f64, x0: &ArrayD<f64>, step: f64) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let slice = x.as_slice_mut().expect("standard layout");
        let orig = slice[idx];
        slice[idx] = orig + step;
        let fp = f(&x);
        let slice = x.as_slice_mut().unwrap();
        slice[idx] = orig - step;
        let fm = f(&x);
        let slice = x.as_slice_mut().unwrap();
        slice[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    g
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
