use super::params::ParamStore;

/// Worst disagreement found by [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the gradients stored in `params` against central differences of `f`.
///
/// The relative error of each scalar is
/// `|analytic - numeric| / (|numeric| + 1e-12)`; the maximum is reported.
/// Callers fill `params` gradients (e.g. via a backward pass) first.
pub fn finite_diff_check<F>(params: &mut ParamStore, mut f: F, eps: f64) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must lie in (0, 1e-2]");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = params.iter().map(|t| t.name.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        let id = super::ParamId(ti);
        let n = params.get(id).values.len();
        for k in 0..n {
            let orig = params.get(id).values.as_slice().expect("contiguous")[k];
            params.get_mut(id).values.as_slice_mut().expect("contiguous")[k] = orig + eps;
            let up = f(params);
            params.get_mut(id).values.as_slice_mut().expect("contiguous")[k] = orig - eps;
            let down = f(params);
            params.get_mut(id).values.as_slice_mut().expect("contiguous")[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let analytic = params.get(id).grad.as_slice().expect("contiguous")[k];
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-12);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report = GradCheckReport {
                    max_rel_error: if rel.is_nan() { f64::INFINITY } else { rel },
                    worst_param: name.clone(),
                    worst_index: k,
                    analytic,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    report
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}
