//! Finite-difference verification of analytic gradients.
//!
//! Every trainable path in this crate is differentiated by the tape in
//! [`crate::autodiff`]; this module is the independent referee. It rebuilds
//! the scalar function with each parameter entry perturbed by `+/- epsilon`
//! and compares the central difference against the tape's gradient.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{IcvlError, Result};
use crate::matrix::EmbeddingMatrix;

pub type NamedMatrices = BTreeMap<String, EmbeddingMatrix>;
pub type NamedVars = BTreeMap<String, Var>;

/// Outcome of checking one named parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub parameter_name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Relative error with a floor so near-zero gradients are judged on
/// absolute error at the floor scale instead of exploding.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare tape gradients of `build` against central finite differences.
///
/// `build` must register every entry of `params` (in map order) and return a
/// 1x1 scalar node. A report is produced per parameter; `passed` holds when
/// `max_rel_err <= tolerance`.
pub fn grad_check<F>(
    build: F,
    params: &NamedMatrices,
    epsilon: f64,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape, &NamedVars) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(IcvlError::config(format!(
            "grad_check epsilon must be positive, got {epsilon}"
        )));
    }

    let eval = |candidate: &NamedMatrices| -> Result<(Tape, NamedVars, Var)> {
        let mut tape = Tape::new();
        let mut vars = NamedVars::new();
        for (name, m) in candidate {
            vars.insert(name.clone(), tape.param(m.clone()));
        }
        let out = build(&mut tape, &vars)?;
        let value = tape.scalar_value(out);
        if !value.is_finite() {
            return Err(IcvlError::numeric(format!(
                "grad_check objective is non-finite ({value})"
            )));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(params.len());
    for (name, base) in params {
        let analytic = grads
            .wrt(vars[name])
            .cloned()
            .unwrap_or_else(|| EmbeddingMatrix::zeros(base.rows(), base.dims()));

        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for r in 0..base.rows() {
            for c in 0..base.dims() {
                let probe = |delta: f64| -> Result<f64> {
                    let mut shifted = params.clone();
                    let m = shifted.get_mut(name).expect("param present");
                    m.set(r, c, m.get(r, c) + delta);
                    let (t, _, o) = eval(&shifted)?;
                    Ok(t.scalar_value(o))
                };
                let numeric = (probe(epsilon)? - probe(-epsilon)?) / (2.0 * epsilon);
                let a = analytic.get(r, c);
                max_abs = max_abs.max((a - numeric).abs());
                max_rel = max_rel.max(rel_err(a, numeric));
            }
        }
        reports.push(GradCheckReport {
            parameter_name: name.clone(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            passed: max_rel <= tolerance,
        });
    }
    Ok(reports)
}
