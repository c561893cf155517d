//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::params::ParameterStore;

/// Tensors larger than this are checked on a sample of coordinates.
pub const FULL_CHECK_LIMIT: usize = 10_000;

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_fd: f64,
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `build` against central differences.
///
/// `build` must construct the graph deterministically from the store (any
/// randomness seeded inside) and return the scalar loss node. Every tensor up
/// to [`FULL_CHECK_LIMIT`] elements is checked exhaustively; larger tensors are
/// checked on `sample` evenly strided coordinates (at least 32).
pub fn finite_difference_check<F>(store: &mut ParameterStore, build: F, h: f64, tol: f64, sample: usize) -> Result<FdReport>
where
    F: Fn(&ParameterStore) -> Result<(Graph, NodeId)>,
{
    store.zero_grads();
    let (graph, loss) = build(store)?;
    graph.backward(loss)?.accumulate(store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();

    let eval = |s: &ParameterStore| -> Result<f64> {
        let (g, l) = build(s)?;
        Ok(g.value(l).item())
    };

    let mut report = FdReport { params: Vec::new(), tol };
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    for (k, (id, name, len)) in ids.into_iter().enumerate() {
        let coords: Vec<usize> = if len <= FULL_CHECK_LIMIT {
            (0..len).collect()
        } else {
            let n = sample.max(32).min(len);
            (0..n).map(|i| i * len / n).collect()
        };
        let mut check = ParamCheck {
            name,
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_fd: 0.0,
            flagged: Vec::new(),
        };
        for c in coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[k][c], numeric);
            check.max_abs_fd = check.max_abs_fd.max(numeric.abs());
            check.max_rel_error = check.max_rel_error.max(err);
            if err > tol {
                check.flagged.push(c);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
