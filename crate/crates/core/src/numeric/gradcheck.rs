//! Central finite-difference gradient checking.
//!
//! Only evaluates the loss; it never touches the backward pass, so it serves
//! as an independent reference for analytic gradients.

use super::{ParamId, ParamStore};

/// Per-element comparison of analytic and numeric derivatives.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` for every coordinate.
pub fn numeric_gradient(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x);
        x[i] = orig - h;
        let down = f(x);
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Compares gradients already accumulated in `store` for `ids` with central
/// differences of `loss`, perturbing one scalar at a time.
///
/// When `max_per_param` is set, at most that many evenly spaced elements per
/// parameter are probed.
pub fn check_params(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    floor: f64,
    max_per_param: Option<usize>,
    loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let probes: Vec<(ParamId, Vec<usize>)> = ids
        .iter()
        .map(|&id| {
            let n = store.get(id).numel();
            let stride = max_per_param.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
            (id, (0..n).step_by(stride).collect())
        })
        .collect();
    check_elements(store, &probes, h, floor, loss)
}

/// Like [`check_params`] on an explicit list of element indices per parameter.
pub fn check_elements(
    store: &mut ParamStore<f64>,
    probes: &[(ParamId, Vec<usize>)],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for (id, indices) in probes {
        let id = *id;
        let analytic = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for &i in indices {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[i], numeric, floor);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), i, analytic[i], numeric));
            }
        }
    }
    report
}
