use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is zero are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of scalar `f(x)` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), step, tol)
}

/// Multi-input form: `f` receives one leaf per entry of `params`, all marked
/// requires-grad, and every coordinate of every input is perturbed.
pub fn grad_check_many<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, t)| {
            g.grad(id)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
        passed: true,
    };
    let mut work = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[p][i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (p, i);
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
