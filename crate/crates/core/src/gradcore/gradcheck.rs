use rand::seq::index;
use rand::Rng;

use super::{ParamStore, TensorId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on `|analytic - numeric| / max(1, |numeric|)`.
    pub tol: f64,
    /// Upper bound on checked coordinates; all are checked when fewer exist.
    pub max_coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-4,
            tol: 1e-4,
            max_coords: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates where the loss was non-finite at a perturbed point.
    pub skipped: Vec<(String, usize)>,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub passed: bool,
}

/// Compare the analytic gradient accumulated by `loss` against central
/// differences.
///
/// `loss` must zero nothing itself: it evaluates the loss at the current
/// values and adds its gradient into the store. It is called once for the
/// analytic pass and twice per checked coordinate; it must be deterministic
/// (reseed any noise inside the closure). Only tensors in `restrict` are
/// probed when it is `Some`.
pub fn finite_diff_check<F, R>(
    params: &mut ParamStore,
    mut loss: F,
    restrict: Option<&[TensorId]>,
    cfg: GradCheckConfig,
    rng: &mut R,
) -> GradCheckReport
where
    F: FnMut(&mut ParamStore) -> f64,
    R: Rng + ?Sized,
{
    params.zero_grads();
    loss(params);
    let tensors: Vec<TensorId> = match restrict {
        Some(ids) => ids.to_vec(),
        None => params.ids().collect(),
    };
    let analytic: Vec<Vec<f64>> = tensors.iter().map(|&id| params.grad(id).to_vec()).collect();

    let coords: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(t, &id)| (0..params.value(id).len()).map(move |k| (t, k)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= cfg.max_coords {
        coords
    } else {
        let mut picks = index::sample(rng, coords.len(), cfg.max_coords).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|k| coords[k]).collect()
    };

    let mut report = GradCheckReport {
        checked: 0,
        skipped: Vec::new(),
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    for (t, k) in chosen {
        let id = tensors[t];
        let orig = params.value(id)[k];
        params.value_mut(id)[k] = orig + cfg.h;
        let plus = loss(params);
        params.value_mut(id)[k] = orig - cfg.h;
        let minus = loss(params);
        params.value_mut(id)[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            report.skipped.push((params.name(id).to_string(), k));
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let a = analytic[t][k];
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(Mismatch {
                tensor: params.name(id).to_string(),
                index: k,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    // leave the analytic gradient in place for the caller
    params.zero_grads();
    loss(params);
    report.passed = report.max_rel_error <= cfg.tol;
    report
}
