//! Central finite-difference verification of reverse-mode gradients.

use super::{Tape, Var};
use crate::error::{ReplError, Result};
use crate::params::ParamStore;
use crate::tensor::{ParamId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate at which `max_rel_err` occurs.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Largest relative error between autodiff and central differences of a
/// scalar function of `x`, with denominator `max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_report(f, x, h).map(|r| r.max_rel_err)
}

pub fn grad_check_report<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(ReplError::invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.wrt(xv).into_data();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.input(probe);
        let y = f(&mut t, v)?;
        Ok(t.value(y).item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }

    let (mut max_rel_err, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let err = (a - n).abs() / denom;
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

/// Same check for a registry parameter: `f` builds the scalar from a
/// store, and the analytic side is read from the tape's [`super::GradMap`].
pub fn grad_check_param<F>(f: F, store: &ParamStore, id: &ParamId, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(ReplError::invalid("grad_check_param", "step must be positive"));
    }
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .params()
        .get(id)
        .ok_or_else(|| ReplError::UnknownParam(format!("{id} (no gradient recorded)")))?
        .clone();
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let orig = probe.get(id)?.data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            probe.get_mut(id)?.data_mut()[i] = v;
            let mut t = Tape::new();
            let y = f(&mut t, &probe)?;
            Ok(t.value(y).item())
        };
        let n = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
        probe.get_mut(id)?.data_mut()[i] = orig;
        let a = analytic.data()[i];
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
    }
    Ok(worst)
}
