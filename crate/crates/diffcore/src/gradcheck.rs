//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst componentwise relative error, with denominator `max(|a|, |b|, 1e-8)`.
    pub max_rel_error: f64,
    /// Flat index (in parameter order) of the worst component.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares backward gradients of `build` against central differences over
/// every scalar parameter in `params`.
///
/// `build` must construct the same deterministic loss on whatever parameter
/// values the graph it receives is bound to.
pub fn grad_check<F>(params: &ParamSet, epsilon: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(DiffError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss)?.flatten()
    };

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = build(&mut g)?;
        let v = g.value(loss).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DiffError::NonFinite { op: "grad_check" })
        }
    };

    let mut work = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut flat = 0;
    for id in params.ids() {
        for k in 0..params.get(id).numel() {
            let orig = params.get(id).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[k] = orig + offset;
                eval(&work)
            };
            let (up1, down1) = (at(epsilon)?, at(-epsilon)?);
            let (up2, down2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            work.get_mut(id).data_mut()[k] = orig;

            // Fourth-order central stencil: truncation error O(epsilon^4).
            let numeric = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * epsilon);
            let a = analytic[flat];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst_index = flat;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
            flat += 1;
        }
    }
    Ok(report)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
