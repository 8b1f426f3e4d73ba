//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever consumes the loss *value* of the supplied
//! function, so it stays independent of the backward implementation it
//! checks.

use super::graph::{Graph, NodeId};
use super::{Tensor, TensorError};

/// Absolute floor in the relative-error denominator. Gradients smaller than
/// this are compared absolutely, which keeps finite-difference rounding noise
/// on truly-zero gradients from registering as large relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric gradient entry.
/// Defined as 0 when the two agree exactly (including the all-zero case).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic == numeric {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst entry for one parameter tensor.
#[derive(Debug, Clone)]
pub struct FiniteDiffEntry {
    pub param_index: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub entries: Vec<FiniteDiffEntry>,
    pub h: f64,
    pub tol: f64,
}

impl FiniteDiffReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

/// Compare the analytic gradients of `f` against central differences.
///
/// `f` maps parameter tensors to `(loss, per-parameter analytic gradients)`;
/// it must be deterministic. Each parameter element is perturbed by `±h`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> FiniteDiffReport
where
    F: Fn(&[Tensor]) -> (f64, Vec<Vec<f64>>),
{
    assert!(h > 0.0, "finite_diff_check: h must be > 0");
    let (_, analytic) = f(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "analytic gradient count must match params"
    );
    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        assert_eq!(
            analytic[p].len(),
            params[p].numel(),
            "analytic gradient {p} has wrong length"
        );
        let mut worst = FiniteDiffEntry {
            param_index: p,
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: analytic[p].first().copied().unwrap_or(0.0),
            numeric: 0.0,
        };
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let (loss_plus, _) = f(&work);
            work[p].data_mut()[i] = orig - h;
            let (loss_minus, _) = f(&work);
            work[p].data_mut()[i] = orig;
            let numeric = (loss_plus - loss_minus) / (2.0 * h);
            let err = rel_err(analytic[p][i], numeric);
            if err >= worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_element = i;
                worst.analytic = analytic[p][i];
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    FiniteDiffReport { entries, h, tol }
}

/// Finite-difference-check a graph-built scalar loss. `build` receives the
/// parameters already registered as differentiable leaves and returns the
/// loss node; the analytic side comes from `Graph::backward`.
pub fn graph_fd_check<F>(build: F, params: &[Tensor], h: f64, tol: f64) -> FiniteDiffReport
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    finite_diff_check(
        |ps: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ps
                .iter()
                .map(|t| {
                    let mut leaf = t.clone();
                    leaf.requires_grad = true;
                    g.leaf(&leaf)
                })
                .collect();
            let loss = build(&mut g, &ids).expect("loss builds on valid shapes");
            let grads = g.backward(loss).expect("scalar loss");
            let per_param = ids
                .iter()
                .map(|&id| grads.get(id).expect("leaf gradient").to_vec())
                .collect();
            (g.value(loss)[0], per_param)
        },
        params,
        h,
        tol,
    )
}
