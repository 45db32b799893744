//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_EPSILON: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `build` against central differences with
/// respect to every element of every input.
///
/// `build` receives the inputs registered as parameters and must return a
/// scalar. It is rebuilt from scratch for every perturbation, so it must be
/// a pure function of its inputs. With no inputs the check passes vacuously.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor], fault: Option<OpKind>, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.param(x.clone())).collect();
        let out = build(&mut t, &vs)?;
        Ok(t.value(out).values()[0])
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].values()[j];
            work[i].values_mut()[j] = orig + FD_EPSILON;
            let plus = eval(&work)?;
            work[i].values_mut()[j] = orig - FD_EPSILON;
            let minus = eval(&work)?;
            work[i].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            max_err = max_err.max(relative_error(analytic.values()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        checked,
        max_rel_error: max_err,
        passed: max_err < FD_TOLERANCE,
    })
}
