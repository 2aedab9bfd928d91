//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step perturbation crosses a rectifier kink.
    pub skipped: usize,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Folds another report into this one, keeping the worst error.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
    }

    pub fn empty(tol: f64) -> Self {
        Self {
            tol,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
            failures: Vec::new(),
        }
    }
}

/// Error between an analytic and a numeric derivative, relative to the larger
/// magnitude with a floor of 1 so near-zero gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.kink_pattern()))
}

/// Compares the tape gradient of a scalar function `f` against central
/// differences `(f(x+h) − f(x−h)) / 2h` for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Input(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::empty(tol);
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + step;
            let (fp, kp) = evaluate(&f, &work)?;
            work[k].data_mut()[i] = x0 - step;
            let (fm, km) = evaluate(&f, &work)?;
            work[k].data_mut()[i] = x0;
            if kp != km {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if !(err <= tol) {
                report.failures.push(Mismatch {
                    input: k,
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
