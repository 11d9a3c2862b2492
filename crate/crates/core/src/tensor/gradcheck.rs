use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape's gradient of a scalar function against central
/// differences at every coordinate of `x`.
///
/// Returns `max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
/// `f` must be deterministic; a non-deterministic `f` makes the result
/// meaningless and is not detected.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
