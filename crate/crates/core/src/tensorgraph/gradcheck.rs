use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Per-coordinate relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The absolute floor keeps coordinates whose true derivative is zero (or
/// nearly so) from reporting pure rounding noise as a large relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::shape("grad_check", value.shape(), "a scalar"));
    }
    Ok(value.item())
}

/// Checks the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval_scalar(&f, plus)?;
        let fm = eval_scalar(&f, minus)?;
        numeric.push((fp - fm) / (2.0 * h));
    }

    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(&numeric) {
        max_rel_err = max_rel_err.max(relative_error(a, n));
        max_abs_err = max_abs_err.max((a - n).abs());
    }
    Ok(GradCheck {
        max_rel_err,
        max_abs_err,
        analytic,
        numeric,
    })
}
