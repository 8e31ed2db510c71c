//! Reverse-mode differentiation: tensors, the op tape, and a
//! finite-difference verifier for checking analytic gradients.

mod tape;
mod tensor;

pub use tape::{
    sigmoid, softplus, trilinear_sample, GradBuffer, Gradients, GridGeom, Tape, Var,
};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with the given step.
///
/// `f` receives a fresh tape and a leaf holding the current point and must
/// return a scalar output var. The analytic gradient comes from one backward
/// pass; the oracle then re-evaluates `f` at `x +- step` per component.
/// Because only the supplied leaf is perturbed, expressions that apply
/// stop-gradient to other (constant) inputs check cleanly.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&mut Tape, Var) -> Var,
    x: &Tensor,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::usage("finite_diff_check requires step > 0"));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    let grads = tape.backward(out)?;
    let analytic = grads.tensor(leaf);

    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.leaf(Tensor::from_vec(x.rows(), x.cols(), data));
        let out = f(&mut t, leaf);
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(Error::numeric("finite_diff_check probe is non-finite"));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / (a.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Finite-difference check against a precomputed analytic gradient, for
/// functions evaluated outside the tape (e.g. with frozen side inputs).
pub fn finite_diff_check_values(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::usage("finite_diff_check requires step > 0"));
    }
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe)?;
        probe[i] = x[i] - step;
        let fm = f(&probe)?;
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric("finite_diff_check probe is non-finite"));
        }
        let fd = (fp - fm) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
