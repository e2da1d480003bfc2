//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst_param: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `backward()` against central differences for every entry of every parameter.
///
/// `f` receives a fresh tape and the parameters recorded as leaves, and must return a `1×1`
/// variable. The report is returned whether or not the check passes.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }

    let analytic: Vec<Tensor> = {
        let tape = Tape::checked();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let value = out.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("function value {value}")));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::checked();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p.clone())).collect();
        let v = f(&tape, &vars)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("function value {v} under perturbation")))
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_error = 0.0_f64;
    let mut worst_param = None;
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..work[pi].len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            if rel > max_rel_error || worst_param.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst_param = Some((pi, e));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        tol,
        passed: max_rel_error <= tol,
    })
}
