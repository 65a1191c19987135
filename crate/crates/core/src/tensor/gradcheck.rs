//! Central finite-difference gradient checks.
//!
//! The check only ever calls the forward pass, so it stays independent of
//! the backward kernels it validates.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of one check: worst relative error over all inputs.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares `backward` against central differences for every element of
/// every input. `f` builds a scalar from the given input vars.
///
/// Relative error per input is `‖analytic − numeric‖∞ / max(‖analytic‖∞,
/// ‖numeric‖∞, 1e-8)`.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let numeric = Tensor::new(inputs[k].shape(), numeric)?;
        let abs = analytic.max_abs_diff(&numeric);
        let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
        worst.max_abs_error = worst.max_abs_error.max(abs);
        worst.max_rel_error = worst.max_rel_error.max(abs / scale);
    }
    Ok(worst)
}
