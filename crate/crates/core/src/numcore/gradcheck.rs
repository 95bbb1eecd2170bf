//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Below this magnitude both gradients are round-off around an exact zero
/// (central differences at eps >= 1e-6 leave at most ~1e-10 of noise).
pub const ZERO_GRADIENT: f64 = 1e-8;

/// `|a - n| / (|a| + |n|)`, or 0 when both lie under [`ZERO_GRADIENT`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs() + numeric.abs();
    if analytic.abs() < ZERO_GRADIENT && numeric.abs() < ZERO_GRADIENT {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

/// Largest coordinate-wise [`relative_error`] across paired tensors.
pub fn max_relative_error(analytic: &[Tensor2], numeric: &[Tensor2]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::Argument(format!("{} analytic vs {} numeric tensors", analytic.len(), numeric.len())));
    }
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::Shape {
                op: "max_relative_error",
                detail: format!("{:?} vs {:?}", a.shape(), n.shape()),
            });
        }
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(*x, *y));
        }
    }
    Ok(worst)
}

fn eval_loss<F>(loss_fn: &F, params: &[Tensor2]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let refs: Vec<&Tensor2> = params.iter().collect();
    let vars = tape.leaves(&refs);
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Loss value and tape gradients of `loss_fn` at `params`.
pub fn analytic_gradient<F>(loss_fn: &F, params: &[Tensor2]) -> Result<(f64, Vec<Tensor2>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let refs: Vec<&Tensor2> = params.iter().collect();
    let vars = tape.leaves(&refs);
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads.collect(&vars)))
}

/// Central differences `(L(θ+ε) - L(θ-ε)) / 2ε`, one coordinate at a time.
pub fn numeric_gradient<F>(loss_fn: &F, params: &[Tensor2], eps: f64) -> Result<Vec<Tensor2>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite parameter".into()));
    }
    let mut work: Vec<Tensor2> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor2::zeros(params[pi].rows(), params[pi].cols());
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval_loss(loss_fn, &work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval_loss(loss_fn, &work)?;
            work[pi].data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at perturbed point (tensor {pi}, coordinate {k}): {plus} / {minus}"
                )));
            }
            g.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Max relative error between tape gradients and central differences.
///
/// `loss_fn` receives the parameters bound as leaves, in order, and must
/// return a scalar node.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor2], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let numeric = numeric_gradient(&loss_fn, params, eps)?;
    let (_, analytic) = analytic_gradient(&loss_fn, params)?;
    max_relative_error(&analytic, &numeric)
}
