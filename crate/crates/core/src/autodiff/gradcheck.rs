use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest relative disagreement between backprop gradients and central
/// differences, over every element of every parameter leaf on the tape.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
/// where `floor = FD_NOISE_FACTOR * eps * max(1, |loss|) / step`, i.e. well
/// above the rounding noise of a central difference. Gradients smaller than
/// that cannot be resolved by differencing and are compared absolutely.
/// The tape is left replayed at the original leaf values.
pub const FD_NOISE_FACTOR: f64 = 1e5;

pub fn finite_diff_check(tape: &mut Tape, inputs: &[(Var, Tensor)], loss: Var, step: f64) -> Result<f64> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidInput(format!("finite-difference step must be > 0, got {step}")));
    }
    for (v, t) in inputs {
        tape.set_leaf(*v, t.clone())?;
    }
    tape.replay()?;
    if tape.value(loss).len() != 1 {
        return Err(Error::shape("finite_diff_check", format!("loss must be scalar, got {:?}", tape.value(loss).shape())));
    }
    let grads = tape.backward(loss)?;
    let params: Vec<Var> = tape
        .param_vars()
        .into_iter()
        .filter(|v| matches!(tape.op(*v), Op::Param(_)))
        .collect();

    let floor = FD_NOISE_FACTOR * f64::EPSILON * tape.value(loss).item().abs().max(1.0) / step;
    let mut worst = 0.0f64;
    for p in params {
        let analytic = grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros_like(tape.value(p)));
        for j in 0..analytic.len() {
            let orig = tape.value(p).data()[j];
            tape.leaf_data_mut(p)[j] = orig + step;
            tape.replay()?;
            let up = tape.value(loss).item();
            tape.leaf_data_mut(p)[j] = orig - step;
            tape.replay()?;
            let down = tape.value(loss).item();
            tape.leaf_data_mut(p)[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    tape.replay()?;
    Ok(worst)
}
