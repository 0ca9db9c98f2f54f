//! Central finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for a
/// scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// Same as [`finite_diff_check`] over every coordinate of several inputs.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("eps {eps} outside [1e-7, 1e-3]"),
        ));
    }

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let loss = f(&tape, &vars)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { value });
        }
        tape.backward(loss)?;
        vars.iter()
            .zip(xs)
            .map(|(v, x)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let value = f(&tape, &vars)?.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { value });
        }
        Ok(value)
    };

    let mut inputs = xs.to_vec();
    let mut worst = 0.0f64;
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..xs[which].numel() {
            let orig = xs[which].data()[i];
            inputs[which].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[i] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
