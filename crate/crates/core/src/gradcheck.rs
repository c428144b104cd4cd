//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward graph, so it is an
//! independent oracle for the hand-written backward rules.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default step for central differences in double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; falls back to the
/// absolute error when both gradients are (numerically) zero.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of a scalar function at `x`.
pub fn numerical_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, step: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Builds `build(tape, leaves)` with every input as a gradient leaf and
/// returns the relative error between the tape gradient and the
/// finite-difference gradient, one entry per input.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(leaves[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let numeric = numerical_gradient(
            |probe| {
                let mut t = Tape::inference();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == k { probe.clone() } else { v.clone() }))
                    .collect();
                let out = build(&mut t, &vars)?;
                t.value(out).item()
            },
            input,
            step,
        )?;
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}
