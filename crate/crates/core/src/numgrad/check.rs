//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numgrad::{Graph, Matrix, NodeId};

/// Step used by the gradient suites.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Compares reverse-mode gradients of `f` at `params` against central
/// differences with step `h`.
///
/// `f` receives a fresh graph and the param leaves (in the same order as
/// `params`) and must return a scalar node. The result is the maximum over
/// every parameter entry of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Matrix> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, &id) in ids.iter().enumerate() {
        let analytic = grads.wrt(id);
        for e in 0..params[pi].len() {
            let orig = params[pi].as_slice()[e];
            work[pi].as_mut_slice()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice()[e];
            if numeric.is_nan() || a.is_nan() {
                return Err(Error::NanInCheck {
                    param: pi,
                    entry: e,
                });
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
