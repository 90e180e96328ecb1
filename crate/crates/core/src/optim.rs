//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;

/// Learning rate used at desk scale.
pub const DESK_LR: f64 = 1e-3;
/// Learning rate reported for the full-size models.
pub const PAPER_LR: f64 = 5e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Real = f32> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>, lr: f64) -> Self {
        let zeros: Vec<Vec<F>> = params.tensors().iter().map(|t| vec![F::zero(); t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, lr }
    }

    pub fn paper_preset(params: &ParamSet<F>) -> Self {
        Self::new(params, PAPER_LR)
    }
}

/// One Adam step over every parameter; advances `state.t` by one.
pub fn adam_update<F: Real>(params: &mut ParamSet<F>, grads: &[Vec<F>], state: &mut AdamState<F>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let n = params.get(i).len();
        if g.len() != n || state.m[i].len() != n {
            return Err(Error::dim(format!(
                "gradient for {} has {} values, parameter has {n}",
                params.name(i),
                g.len()
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (fb1, fb2) = (F::of(b1), F::of(b2));
    let (f1b1, f1b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
    let (fc1, fc2) = (F::of(c1), F::of(c2));
    let (lr, eps) = (F::of(state.lr), F::of(state.eps));
    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.get_mut(i).data_mut();
        for j in 0..g.len() {
            m[j] = fb1 * m[j] + f1b1 * g[j];
            v[j] = fb2 * v[j] + f1b2 * g[j] * g[j];
            let mh = m[j] / fc1;
            let vh = v[j] / fc2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<F: Real>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
