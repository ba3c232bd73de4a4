//! Central-difference verification of graph gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Absolute error below which a mismatch is central-difference round-off
/// (about `ε·|L|/h`) rather than a wrong gradient.
pub const NOISE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// `‖g_ad − g_fd‖ / (‖g_fd‖ + 1e-8)` over the parameter array.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
    /// `rel_error <= tol` or `max_abs_error <= NOISE_FLOOR`.
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Worst relative error among parameters whose gradient is above round-off.
    pub fn worst_resolved(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.grad_norm > NOISE_FLOOR)
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares autodiff gradients of `loss` against central differences with step `h`.
///
/// `loss` must be deterministic for a fixed store (seed any randomness inside it).
pub fn finite_diff_check<F>(store: &ParamStore, loss: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = loss(store, &mut g)?;
    let ad = g.backward(root)?.for_store(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let r = loss(s, &mut g)?;
        Ok(g.scalar_value(r))
    };

    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.value(id).len();
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let orig = store.value(id).data[k];
            work.value_mut(id).data[k] = orig + h;
            let fp = eval(&work)?;
            work.value_mut(id).data[k] = orig - h;
            let fm = eval(&work)?;
            work.value_mut(id).data[k] = orig;
            let num = (fp - fm) / (2.0 * h);
            let d = ad[id.0].data[k] - num;
            diff2 += d * d;
            fd2 += num * num;
            max_abs = max_abs.max(d.abs());
        }
        let rel = diff2.sqrt() / (fd2.sqrt() + 1e-8);
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            rel_error: rel,
            max_abs_error: max_abs,
            grad_norm: fd2.sqrt(),
            passed: rel <= tol || max_abs <= NOISE_FLOOR,
        });
    }
    Ok(GradCheckReport { params, tol })
}
