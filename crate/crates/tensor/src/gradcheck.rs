//! Central finite-difference verification of analytic gradients.
//!
//! The analytic gradient comes from the tape in the precision under test;
//! the numeric oracle always differences the same computation in `f64`, so
//! a 32-bit check measures the 32-bit backward rules rather than `f32`
//! cancellation noise in the oracle.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::optim::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// A deterministic scalar computation over named parameters, evaluable in
/// any precision.
pub trait Objective {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, params: &BTreeMap<String, Var>) -> Result<Var>;
}

/// Step and error normalization for [`grad_check`].
///
/// The per-coordinate error is `|a − n| / max(|a|, |n|, floor)` where `a`
/// is the analytic and `n` the numeric derivative. The floor keeps
/// coordinates whose true derivative is ~0 from dividing rounding noise by
/// zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
}

impl GradCheckOptions {
    /// Defaults for checking gradients computed in precision `T`. The
    /// floor is wider for `f32`, whose analytic gradients carry ~1e-7
    /// relative rounding even where the true derivative is zero.
    pub fn for_precision<T: Real>() -> Self {
        let floor = if std::mem::size_of::<T>() <= 4 { 1e-2 } else { 1e-4 };
        Self { step: 1e-5, floor }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Worst error per parameter, in name order.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn eval<T: Real, O: Objective>(
    store: &ParamStore<T>,
    obj: &O,
) -> Result<(Tape<T>, BTreeMap<String, Var>, Var)> {
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, t) in store.iter() {
        vars.insert(name.to_string(), tape.param(t)?);
    }
    let loss = obj.loss(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Analytic gradient of `obj` at `store` in precision `T`, by name.
pub fn analytic_grads<T: Real, O: Objective>(
    store: &ParamStore<T>,
    obj: &O,
) -> Result<BTreeMap<String, Vec<T>>> {
    let (tape, vars, loss) = eval(store, obj)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|(name, &v)| {
            let len = store.get(name).map(|t| t.len()).unwrap_or(0);
            let g = grads.wrt(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len]);
            (name.clone(), g)
        })
        .collect())
}

/// Compares the tape gradient of `obj` (precision `T`) with the central
/// difference `(f(θ+h) − f(θ−h)) / 2h` of the same objective in `f64`, for
/// every coordinate of every parameter.
pub fn grad_check<T: Real, O: Objective>(
    store: &ParamStore<T>,
    obj: &O,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(store, obj)?;
    let mut probe: ParamStore<f64> = store.cast();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        per_param: Vec::new(),
        coords_checked: 0,
    };
    for (name, grad) in analytic {
        let mut worst_here = 0.0f64;
        for (i, a) in grad.iter().enumerate() {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let (tp, _, lp) = eval(&probe, obj)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let (tm, _, lm) = eval(&probe, obj)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * opts.step);
            let err = rel_err(a.to_f64().unwrap(), numeric, opts.floor);
            report.coords_checked += 1;
            worst_here = worst_here.max(err);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
        report.per_param.push((name, worst_here));
    }
    Ok(report)
}
