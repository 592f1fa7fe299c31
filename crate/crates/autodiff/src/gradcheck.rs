//! Central finite-difference oracle for gradient checks.
//!
//! Deliberately independent of the tape's backward pass: it only calls a
//! user-supplied forward closure, perturbing one input element at a time.

use crate::tensor::Tensor;

/// Central finite differences of a scalar-valued function of several
/// tensors, with respect to input `arg`.
pub fn finite_diff(
    f: &dyn Fn(&[Tensor]) -> f32,
    inputs: &[Tensor],
    arg: usize,
    step: f32,
) -> Tensor {
    let mut grad = Tensor::zeros(inputs[arg].shape());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs[arg].numel() {
        let orig = inputs[arg].data()[i];
        work[arg].data_mut()[i] = orig + step;
        let plus = f(&work) as f64;
        work[arg].data_mut()[i] = orig - step;
        let minus = f(&work) as f64;
        work[arg].data_mut()[i] = orig;
        grad.data_mut()[i] = ((plus - minus) / (2.0 * step as f64)) as f32;
    }
    grad
}

/// True when `a` and `b` agree elementwise within `rel_tol`, relative to
/// `max(|a_i|, |b_i|, 1)` so near-zero gradients compare at absolute scale.
pub fn grads_close(a: &Tensor, b: &Tensor, rel_tol: f32) -> bool {
    max_rel_err(a, b) <= rel_tol
}

pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0f32, f32::max)
}
