use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::Result;

/// Compares reverse-mode gradients with central differences.
///
/// `build` constructs the loss graph from a parameter store; it is called
/// once for the analytic gradient and twice per trainable entry. Returns the
/// largest `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(build: F, store: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    let (graph, root) = build(store)?;
    let grads = graph.backward(root, 1.0)?;
    let mut probe = store.clone();
    let mut worst = 0.0_f64;
    for p in store.iter().filter(|p| p.trainable) {
        let analytic = grads.get(&p.id);
        for k in 0..p.tensor.len() {
            let orig = p.tensor.data()[k];
            probe.values_mut(p.id)[k] = orig + eps;
            let (g, r) = build(&probe)?;
            let up = g.scalar(r);
            probe.values_mut(p.id)[k] = orig - eps;
            let (g, r) = build(&probe)?;
            let down = g.scalar(r);
            probe.values_mut(p.id)[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.map_or(0.0, |t| t.data()[k]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
