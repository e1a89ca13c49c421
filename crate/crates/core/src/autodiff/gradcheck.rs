//! Central-difference verification of tape gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central difference with the given step, over every coordinate of `x`.
///
/// The relative error of one coordinate is
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// [`grad_check`] restricted to a subset of flat coordinates, for inputs too
/// large to perturb exhaustively.
pub fn grad_check_coords<T, F>(f: F, x: &Tensor<T>, step: T, coords: &[usize]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |point: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.leaf(point);
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item()?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::domain("grad_check", "function value is not finite"))
        }
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::domain("grad_check", "function value is not finite"));
    }
    let analytic = tape.backward(out)?.dense(v);

    let floor = T::of(1e-8);
    let two = T::of(2.0);
    let mut worst = T::zero();
    for &i in coords {
        if i >= x.len() {
            return Err(Error::Contract(format!(
                "coordinate {i} outside tensor of {} values",
                x.len()
            )));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / floor.max(a.abs() + numeric.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
