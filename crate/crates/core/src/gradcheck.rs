//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, SampleMode, Var};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked scalars of |analytic − numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Options for [`finite_diff_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many evenly spaced entries per array.
    pub max_per_param: Option<usize>,
    /// Lower bound on the relative-error denominator. Central differences of a
    /// loss near 100 carry roundoff near 1e-9, so smaller gradients are noise.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_per_param: None, floor: 1e-6 }
    }
}

/// Compare the tape gradient of `f` with central differences over every
/// trainable scalar of `params`.
///
/// `f` builds a scalar loss on a fresh graph each call and must be
/// deterministic (seed any sampling inside it). Graphs run in
/// [`SampleMode::Relaxed`] so straight-through samples are differentiable.
pub fn finite_diff_check<F>(params: &ParamSet, epsilon: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &ParamSet) -> Result<Var>,
{
    finite_diff_check_with(params, GradCheckOptions { epsilon, ..GradCheckOptions::default() }, f)
}

pub fn finite_diff_check_with<F>(params: &ParamSet, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &ParamSet) -> Result<Var>,
{
    let eval = |ps: &ParamSet, what: &str| -> Result<f64> {
        let mut g = Graph::with_mode(SampleMode::Relaxed);
        let b = g.bind(ps);
        let loss = f(&mut g, &b, ps)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NumericDomain(format!("loss is not finite at {what}")));
        }
        Ok(v)
    };

    let mut g = Graph::with_mode(SampleMode::Relaxed);
    let b = g.bind(params);
    let loss = f(&mut g, &b, params)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NumericDomain("loss is not finite at the base point".into()));
    }
    let grads = g.backward(loss).for_set(params);
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = params.clone();
    for id in params.ids() {
        if !params.requires_grad(id) {
            continue;
        }
        let n = params.get(id).numel();
        let stride = match opts.max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let base = params.get(id).data()[idx];
            let name = params.name(id);
            work.get_mut(id).data_mut()[idx] = base + opts.epsilon;
            let plus = eval(&work, &format!("{name}[{idx}] + eps"))?;
            work.get_mut(id).data_mut()[idx] = base - opts.epsilon;
            let minus = eval(&work, &format!("{name}[{idx}] - eps"))?;
            work.get_mut(id).data_mut()[idx] = base;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let analytic = grads[id.index()].data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.to_string();
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
