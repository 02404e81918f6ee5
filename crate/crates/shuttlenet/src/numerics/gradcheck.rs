//! Central finite-difference verification of tape gradients.
//!
//! This is the independent route against which `Tape::backward` is
//! checked: it only ever re-evaluates the forward pass.

use crate::error::Result;
use crate::numerics::params::ParamStore;

/// Worst-case comparison for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub worst_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
}

/// Guarded relative error: gradients below `floor` in magnitude are
/// compared on an absolute scale (|a - b| / floor), since central
/// differences carry ~1e-10 absolute noise at h = 1e-5.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Compare the gradients already accumulated in `store` against central
/// finite differences of `loss_fn`, perturbing every scalar of every
/// parameter by +-h. `loss_fn` must be a pure function of the store's
/// parameter values.
pub fn finite_difference_reports(
    store: &mut ParamStore,
    loss_fn: &mut dyn FnMut(&ParamStore) -> Result<f64>,
    h: f64,
) -> Result<Vec<GradReport>> {
    let mut reports = Vec::with_capacity(store.len());
    for slot in 0..store.len() {
        let name = store.name(slot).to_string();
        let len = store.value(slot).len();
        let mut worst = GradReport {
            name: name.clone(),
            worst_rel_err: 0.0,
            worst_index: 0,
            autodiff: 0.0,
            finite_diff: 0.0,
        };
        for idx in 0..len {
            let original = store.value(slot).data()[idx];
            store.entry_mut(slot).value.data_mut()[idx] = original + h;
            let plus = loss_fn(store)?;
            store.entry_mut(slot).value.data_mut()[idx] = original - h;
            let minus = loss_fn(store)?;
            store.entry_mut(slot).value.data_mut()[idx] = original;

            let fd = (plus - minus) / (2.0 * h);
            let ad = store.grad(slot).data()[idx];
            let err = rel_err(ad, fd, REL_ERR_FLOOR);
            if err > worst.worst_rel_err {
                worst.worst_rel_err = err;
                worst.worst_index = idx;
                worst.autodiff = ad;
                worst.finite_diff = fd;
            }
        }
        reports.push(worst);
    }
    Ok(reports)
}
