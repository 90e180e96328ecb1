//! Central finite differences, the oracle every analytic gradient is checked
//! against. Always evaluated in `f64`.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::Var;
use crate::transformer::Graph;

pub const DEFAULT_STEP: f64 = 1e-3;

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite around coordinate {i}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest [`relative_error`] over paired gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max)
}

/// Analytic gradient of every parameter against central differences of the
/// same objective. Returns the largest relative error over all coordinates.
pub fn check_param_gradients(
    params: &ParamSet<f64>,
    h: f64,
    objective: impl Fn(&mut Graph<'_, f64>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::grad(params);
    let loss = objective(&mut g)?;
    g.tape.backward(loss)?;
    let analytic: Vec<f64> = g.param_grads(params).into_iter().flatten().collect();
    let mut work = params.clone();
    let mut worst = 0.0f64;
    let mut k = 0;
    for id in 0..params.len() {
        for i in 0..params.get(id).len() {
            let orig = work.get(id).data()[i];
            let mut at = |v: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = v;
                let mut g = Graph::eval(&work);
                let l = objective(&mut g)?;
                Ok(g.tape.scalar(l))
            };
            let up = at(orig + h)?;
            let down = at(orig - h)?;
            work.get_mut(id).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!("objective is not finite around {}[{i}]", params.name(id))));
            }
            worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * h)));
            k += 1;
        }
    }
    Ok(worst)
}
