use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + 1e-12)`, where
/// `numeric = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`. A non-finite
/// function value or gradient yields `f64::INFINITY`.
pub fn grad_check<F>(mut f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut tape = Tape::new();
    let x = tape.leaf(point.shape(), point.data().to_vec(), true)?;
    let y = f(&mut tape, x)?;
    if !tape.scalar(y).is_finite() {
        return Ok(f64::INFINITY);
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(point.shape(), data)?;
        let y = f(&mut t, x)?;
        Ok(t.scalar(y))
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (a - numeric).abs() / (a.abs() + 1e-12);
        if !err.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
