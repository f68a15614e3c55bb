//! Central finite-difference gradient oracle.
//!
//! Entirely independent of the backward pass it checks: the numeric side
//! only ever re-runs forward evaluations on perturbed copies of the input.

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Compare the analytic gradient of a scalar-valued builder against central
/// finite differences, coordinate by coordinate.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn finite_diff_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite_diff_check: eps {eps} outside [1e-7, 1e-3]"
        )));
    }

    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), true)?;
    let out = build(&mut g, xid)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Usage(
            "finite_diff_check: builder must produce a scalar".to_string(),
        ));
    }
    g.backward(out)?;
    let analytic = g
        .grad(xid)
        .ok_or_else(|| Error::Usage("no gradient reached the input".to_string()))?
        .clone();

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(t.clone(), false)?;
        let out = build(&mut g, id)?;
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
