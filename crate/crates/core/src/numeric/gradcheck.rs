//! Central finite-difference gradient oracle.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominators of the relative error never drop below this value, so that
/// gradients which are zero up to rounding compare by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub violations: Vec<Violation>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference estimate of a scalar function's derivative.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Pin a closure to the higher-ranked signature expected by
/// [`check_gradients`], which closure inference cannot do on its own.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape()));
    }
    Ok(out.item())
}

/// Compare tape gradients of `f` against central differences for every entry
/// of every parameter.
///
/// `f` must be deterministic: stochastic layers inside it have to draw from a
/// freshly seeded generator on every call so masks and noise stay frozen.
pub fn check_gradients<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let base = loss.item();
    let grads = tape.backward(loss)?;

    let again = eval(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        tolerance,
        violations: Vec::new(),
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = eval(&f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = eval(&f, &work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if err > tolerance {
                report.violations.push(Violation {
                    param: p,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}
