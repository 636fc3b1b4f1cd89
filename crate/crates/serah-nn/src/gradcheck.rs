//! Central-difference gradient verification. Uses only the forward pass,
//! so it stays independent of the backward implementation it checks.

use rand::Rng;

use crate::params::{GradStore, ParamId, ParamSet};

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (param name, flat index, analytic, finite-difference) of the worst case.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Verifies `grads` against central differences of `loss_fn` at the
/// sampled (parameter, flat index) positions. `h` is the absolute step.
pub fn check_sampled<F>(
    params: &mut ParamSet,
    grads: &GradStore,
    samples: &[(ParamId, usize)],
    h: f64,
    mut loss_fn: F,
) -> FdReport
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut report = FdReport { checked: 0, max_rel_err: 0.0, worst: None };
    for (pid, idx) in samples {
        let old = params.value(*pid).as_slice().unwrap()[*idx];
        params.value_mut(*pid).as_slice_mut().unwrap()[*idx] = old + h;
        let lp = loss_fn(params);
        params.value_mut(*pid).as_slice_mut().unwrap()[*idx] = old - h;
        let lm = loss_fn(params);
        params.value_mut(*pid).as_slice_mut().unwrap()[*idx] = old;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.get(*pid).map_or(0.0, |g| g.as_slice().unwrap()[*idx]);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((params.name(*pid).to_string(), *idx, an, fd));
        }
    }
    report
}

/// Draws `n` (parameter, flat index) samples across the given parameter
/// ids, roughly uniform over parameters then uniform over entries.
pub fn sample_indices(
    params: &ParamSet,
    ids: &[ParamId],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(ParamId, usize)> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pid = ids[rng.random_range(0..ids.len())];
        let len = params.value(pid).len();
        out.push((pid, rng.random_range(0..len)));
    }
    out
}
