//! Central finite-difference gradient oracle.
//!
//! The oracle only re-evaluates a forward closure at perturbed inputs, so it
//! is independent of the reverse pass it is used to check. It is `f64`-only
//! on purpose: gradient checks run on the double-precision build of the
//! engine.

use ndarray::ArrayD;

/// Numeric gradient of `loss_fn` w.r.t. every element of every array in
/// `inputs`, via central differences with step `h`.
pub fn numeric_gradients<F>(inputs: &[ArrayD<f64>], loss_fn: F, h: f64) -> Vec<ArrayD<f64>>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut grads: Vec<ArrayD<f64>> = inputs
        .iter()
        .map(|a| ArrayD::zeros(a.raw_dim()))
        .collect();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = work[k].as_slice().unwrap()[i];
            work[k].as_slice_mut().unwrap()[i] = orig + h;
            let up = loss_fn(&work);
            work[k].as_slice_mut().unwrap()[i] = orig - h;
            let down = loss_fn(&work);
            work[k].as_slice_mut().unwrap()[i] = orig;
            grads[k].as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Largest relative error between an analytic and a numeric gradient, with a
/// floor that keeps near-zero components from exploding the ratio.
pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
