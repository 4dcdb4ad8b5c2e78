//! Central finite-difference verification of tape gradients.

use super::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

/// Largest `|analytic − numeric| / max(1, |numeric|)` over every coordinate
/// of `x`, where `f` builds a scalar from a leaf holding `x`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let loss = f(&mut tape, leaf)?;
        tape.backward(loss)?.wrt(&tape, leaf)
    };
    let eval = |point: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point, false);
        let loss = f(&mut tape, leaf)?;
        Ok(tape.value(loss).item().as_f64())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::of(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::of(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i].as_f64() - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Same check over the parameters of a model. `coords_per_tensor` bounds the
/// number of probed coordinates per tensor (evenly strided); `None` probes all.
pub fn param_gradient_check<T, F>(
    store: &ParamStore<T>,
    f: F,
    eps: f64,
    coords_per_tensor: Option<usize>,
) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::bind(store, true);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.params(&tape)
    };
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::bind(s, false);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item().as_f64())
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let stride = match coords_per_tensor {
            Some(c) if c < n => n.div_ceil(c),
            _ => 1,
        };
        for i in (0..n).step_by(stride.max(1)) {
            let orig = probe.tensors()[p].data()[i];
            probe.tensors_mut()[p].data_mut()[i] = orig + T::of(eps);
            let up = eval(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = orig - T::of(eps);
            let down = eval(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[i].as_f64() - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
