//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::tape::{Tape, Var};

/// Worst disagreement found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest [`mixed_error`] over every checked entry.
    pub max_error: f64,
    pub worst_param: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Mixed absolute/relative error `|g - n| / (|n| + 1)`.
///
/// Behaves like the absolute error for derivatives below 1 in magnitude and
/// like the relative error above.
pub fn mixed_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1.0)
}

/// Compares tape gradients against `(f(x+h) - f(x-h)) / 2h` entry by entry.
///
/// `loss_fn` receives a fresh tape and one differentiable leaf per matrix in
/// `params` and must return a 1x1 node.
pub fn grad_check<F>(loss_fn: F, params: &[Matrix], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }

    let evaluate = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    let again = evaluate(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst_param: 0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe: Vec<Matrix> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for e in 0..params[p].len() {
            let original = params[p].as_slice()[e];
            probe[p].as_mut_slice()[e] = original + step;
            let plus = evaluate(&probe)?;
            probe[p].as_mut_slice()[e] = original - step;
            let minus = evaluate(&probe)?;
            probe[p].as_mut_slice()[e] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let g = analytic.as_slice()[e];
            let err = mixed_error(g, numeric);
            report.entries_checked += 1;
            if err > report.max_error || report.entries_checked == 1 {
                report.max_error = err;
                report.worst_param = p;
                report.worst_entry = e;
                report.analytic = g;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
