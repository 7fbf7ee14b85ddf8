//! Central finite-difference verification of parameter gradients.

use super::graph::{Graph, Var};
use super::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub parameters: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences over every parameter entry.
pub fn gradcheck(store: &mut ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Var) -> GradCheckReport {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    g.backward(loss);
    let mut analytic = Grads::zeros_like(store);
    g.accumulate_param_grads(&mut analytic);

    let h = 1e-6;
    let mut diff = 0.0;
    let mut num_norm = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + h;
            let mut gp = Graph::new();
            let lp = f(&mut gp, store);
            let plus = gp.value(lp).item();
            store.value_mut(id).data[i] = orig - h;
            let mut gm = Graph::new();
            let lm = f(&mut gm, store);
            let minus = gm.value(lm).item();
            store.value_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            diff += (analytic.tensors[k].data[i] - numeric).powi(2);
            num_norm += numeric * numeric;
        }
    }
    let a = analytic.norm();
    let n = num_norm.sqrt();
    GradCheckReport {
        relative_error: diff.sqrt() / a.max(n).max(1e-12),
        analytic_norm: a,
        parameters: store.count(),
    }
}
