//! Central finite-difference gradient checking.
//!
//! Only evaluates the forward function, so it stays independent of the
//! reverse sweep it is used to verify.

use crate::params::{ParamId, ParamStore};

/// Worst entry of a gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero entries do not blow up.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` w.r.t. one scalar of one parameter.
pub fn numeric_partial(
    f: &dyn Fn(&ParamStore) -> f64,
    params: &mut ParamStore,
    id: ParamId,
    index: usize,
    step: f64,
) -> f64 {
    let orig = params.get(id).data()[index];
    params.get_mut(id).data_mut()[index] = orig + step;
    let up = f(params);
    params.get_mut(id).data_mut()[index] = orig - step;
    let down = f(params);
    params.get_mut(id).data_mut()[index] = orig;
    (up - down) / (2.0 * step)
}

/// Compare `analytic` (one optional tensor per parameter, store order) with
/// central differences at every scalar of every parameter, or at most
/// `max_per_param` evenly spaced scalars per parameter when given.
pub fn check_params(
    f: &dyn Fn(&ParamStore) -> f64,
    params: &mut ParamStore,
    analytic: &[Option<crate::Tensor>],
    step: f64,
    floor: f64,
    max_per_param: Option<usize>,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for index in (0..n).step_by(stride) {
            let a = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |t| t.data()[index]);
            let num = numeric_partial(f, params, id, index, step);
            let err = rel_error(a, num, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = index;
            }
        }
    }
    report
}
