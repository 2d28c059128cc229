//! Central finite-difference gradient verification.
//!
//! These helpers are the independent oracle for every analytic gradient in
//! the crate: they only ever evaluate a loss closure forward, never the
//! backward pass they are checking.

use ndarray::ArrayD;

use crate::tensor::ParamSet;

/// Relative error with an absolute floor, so that gradients that are
/// numerically zero on both sides compare as equal instead of dividing 0/0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-6)
}

/// [`relative_error`] with an explicit floor. Central differences of an
/// O(1) loss at step 1e-6 carry roundoff of about 1e-10, so gradients far
/// below the floor are compared absolutely rather than relatively.
pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}

/// Largest elementwise [`relative_error`] between two same-shaped arrays.
pub fn max_relative_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every element of `x`.
pub fn central_diff(
    x: &ArrayD<f64>,
    step: f64,
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let slice = probe.as_slice_mut().expect("contiguous");
        let orig = slice[i];
        slice[i] = orig + step;
        let plus = f(&probe);
        let slice = probe.as_slice_mut().unwrap();
        slice[i] = orig - step;
        let minus = f(&probe);
        let slice = probe.as_slice_mut().unwrap();
        slice[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Outcome of a whole-parameter-set check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_name: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare analytic gradients (flattened in `ParamSet` visiting order)
/// against central finite differences of `loss`, probing every scalar.
pub fn check_params<P, L>(
    params: &mut P,
    analytic: &[ArrayD<f64>],
    step: f64,
    loss: L,
) -> CheckReport
where
    P: ParamSet<f64>,
    L: FnMut(&P) -> f64,
{
    check_params_floored(params, analytic, step, 1e-6, loss)
}

/// [`check_params`] with an explicit relative-error floor.
pub fn check_params_floored<P, L>(
    params: &mut P,
    analytic: &[ArrayD<f64>],
    step: f64,
    floor: f64,
    mut loss: L,
) -> CheckReport
where
    P: ParamSet<f64>,
    L: FnMut(&P) -> f64,
{
    let names: Vec<String> = {
        let mut v = Vec::new();
        params.for_each(&mut |name, _| v.push(name.to_string()));
        v
    };
    let mut flat_analytic = Vec::new();
    for a in analytic {
        flat_analytic.extend(a.iter().copied());
    }
    let total = params.num_scalars();
    assert_eq!(flat_analytic.len(), total, "analytic/param layout mismatch");

    // map flat index -> array name for diagnostics
    let mut bounds = Vec::new();
    {
        let mut seen = 0;
        params.for_each(&mut |_, a| {
            seen += a.len();
            bounds.push(seen);
        });
    }
    let name_of = |idx: usize| -> &str {
        let slot = bounds.partition_point(|&b| b <= idx);
        &names[slot]
    };

    let mut report = CheckReport {
        checked: total,
        max_rel_error: 0.0,
        worst_name: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in 0..total {
        params.nudge(i, step);
        let plus = loss(params);
        params.nudge(i, -2.0 * step);
        let minus = loss(params);
        params.nudge(i, step);
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error_floored(flat_analytic[i], numeric, floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_name = name_of(i).to_string();
            report.worst_analytic = flat_analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}
