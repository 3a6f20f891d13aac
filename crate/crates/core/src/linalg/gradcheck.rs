//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tape, VarId};

/// A scalar function of a fixed list of parameter matrices, expressed as a
/// tape program so both the analytic and numeric paths run the same code.
pub trait ScalarFn {
    fn eval(&self, tape: &Tape, params: &[VarId]) -> Result<VarId>;
}

impl<F> ScalarFn for F
where
    F: Fn(&Tape, &[VarId]) -> Result<VarId>,
{
    fn eval(&self, tape: &Tape, params: &[VarId]) -> Result<VarId> {
        self(tape, params)
    }
}

fn eval_scalar(f: &impl ScalarFn, params: &[Matrix]) -> Result<f64> {
    let tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f.eval(&tape, &ids)?;
    tape.scalar(root)
}

/// Analytic gradients for every parameter, in parameter order.
pub fn analytic_gradients(f: &impl ScalarFn, params: &[Matrix]) -> Result<Vec<Matrix>> {
    let tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f.eval(&tape, &ids)?;
    let grads = tape.backward(root)?;
    Ok(ids.iter().map(|&id| grads.wrt(id)).collect())
}

/// Compare analytic gradients against central finite differences.
///
/// Returns the maximum over all parameter entries of
/// `|analytic - central| / (|central| + 1e-8)`.
pub fn grad_check(f: &impl ScalarFn, params: &[Matrix], step: f64) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let analytic = analytic_gradients(f, params)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for idx in 0..param.data().len() {
            let base = param.data()[idx];

            work[pi].data_mut()[idx] = base + step;
            let plus = eval_scalar(f, &work)?;
            work[pi].data_mut()[idx] = base - step;
            let minus = eval_scalar(f, &work)?;
            work[pi].data_mut()[idx] = base;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is non-finite at perturbed entry {idx} of parameter {pi}"
                )));
            }
            let central = (plus - minus) / (2.0 * step);
            let err = (analytic[pi].data()[idx] - central).abs() / (central.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
