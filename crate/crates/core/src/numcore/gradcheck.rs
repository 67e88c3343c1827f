use rand::Rng as _;

use super::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compare analytic gradients with central differences on sampled coordinates.
///
/// `build` must construct a scalar loss from the given parameters, and must be
/// deterministic. Coordinates are sampled round-robin over parameters so every
/// tensor is represented.
pub fn grad_check<F>(params: &ParamStore, build: F, eps: f64, n_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    grad_check_with(params, build, eps, n_coords, seed, |_| {})
}

#[doc(hidden)]
pub fn grad_check_with<F, S>(
    params: &ParamStore,
    build: F,
    eps: f64,
    n_coords: usize,
    seed: u64,
    setup: S,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
    S: Fn(&mut Graph),
{
    let mut g = Graph::new();
    setup(&mut g);
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;

    let eval = |ps: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, ps)?;
        Ok(g.value(l).item())
    };

    let candidates: Vec<ParamId> = params.ids().filter(|&id| !params.tensor(id).is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("grad_check: no parameters".into()));
    }
    let mut r = rng::stream(seed, "grad_check");
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    let mut work = params.clone();
    for c in 0..n_coords {
        let id = candidates[c % candidates.len()];
        let idx = r.random_range(0..params.tensor(id).len());
        let orig = params.tensor(id).data()[idx];
        work.tensor_mut(id).data_mut()[idx] = orig + eps;
        let plus = eval(&work)?;
        work.tensor_mut(id).data_mut()[idx] = orig - eps;
        let minus = eval(&work)?;
        work.tensor_mut(id).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[idx]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        report.coords_checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((params.name(id).to_string(), idx));
            }
        }
    }
    Ok(report)
}
