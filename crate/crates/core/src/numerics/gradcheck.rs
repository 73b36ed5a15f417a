use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest coordinate-wise disagreement found by a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: Option<ParamId>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Denominator floor of [`rel_err`]. Central differences of an O(10) loss
/// carry roughly 1e-10 of rounding noise, so gradients below this size are
/// effectively compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `f` at `point` with central differences.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item()?;
        Ok((v, None))
    };
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let zero = Tensor::zeros(point.shape());
    let analytic = grads.get(x).unwrap_or(&zero).clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.set(i, point.data()[i] + step)?;
        let mut minus = point.clone();
        minus.set(i, point.data()[i] - step)?;
        let fd = (eval(&plus)?.0 - eval(&minus)?.0) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[i], fd));
    }
    Ok(worst)
}

/// Gradient check over parameters of `store`. `coords` restricts the probe
/// to the listed `(param, flat index)` pairs; `None` probes every scalar.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    coords: Option<&[(ParamId, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        tape.bind(s);
        let y = f(&mut tape, s)?;
        let v = tape.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    tape.bind(store);
    let y = f(&mut tape, store)?;
    let grads = tape.backward(y)?;
    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .ids()
                .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
                .collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: coords.len(),
    };
    let mut probe = store.clone();
    for &(id, i) in coords {
        let base = store.get(id).data()[i];
        probe.get_mut(id).set(i, base + step)?;
        let up = eval(&probe)?;
        probe.get_mut(id).set(i, base - step)?;
        let down = eval(&probe)?;
        probe.get_mut(id).set(i, base)?;
        let fd = (up - down) / (2.0 * step);
        let a = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let e = rel_err(a, fd);
        if e > report.max_rel_err || report.worst_param.is_none() {
            report = GradCheckReport {
                max_rel_err: e.max(report.max_rel_err),
                worst_param: Some(id),
                worst_index: i,
                analytic: a,
                numeric: fd,
                coordinates: coords.len(),
            };
        }
    }
    Ok(report)
}
