//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{GradTape, ValueId};
use crate::numerics::tensor::Tensor;

/// Builds a scalar computation from one input leaf on the given tape.
pub trait ScalarProgram {
    fn build(&self, tape: &mut GradTape, input: ValueId) -> Result<ValueId>;
}

impl<F> ScalarProgram for F
where
    F: Fn(&mut GradTape, ValueId) -> Result<ValueId>,
{
    fn build(&self, tape: &mut GradTape, input: ValueId) -> Result<ValueId> {
        self(tape, input)
    }
}

fn evaluate(program: &impl ScalarProgram, point: &Tensor) -> Result<f64> {
    let mut tape = GradTape::new();
    let input = tape.leaf(point.clone());
    let out = program.build(&mut tape, input)?;
    Ok(tape.value(out).scalar_value())
}

/// Max over coordinates of the relative error between the tape gradient
/// and a central finite difference of the forward values.
///
/// The error denominator is floored at 1 so that near-zero gradients are
/// compared absolutely. `step` must lie in `[1e-7, 1e-3]`.
pub fn grad_check(program: impl ScalarProgram, point: &Tensor, step: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidConfig {
            key: "grad_check.step".into(),
            message: format!("must be in [1e-7, 1e-3], got {step}"),
        });
    }
    let mut tape = GradTape::new();
    let input = tape.leaf(point.clone());
    let out = program.build(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(input).clone();

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let plus = evaluate(&program, &point.with_nudged(i, step)?)?;
        let minus = evaluate(&program, &point.with_nudged(i, -step)?)?;
        let fd = (plus - minus) / (2.0 * step);
        if !fd.is_finite() {
            return Err(Error::NonFinite { op: "grad_check finite difference" });
        }
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
