//! Central finite-difference checks for analytic gradients.

use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central differences of a scalar function of one tensor.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape(), out)
}

/// Compare the analytic gradient of `f` with respect to each of `inputs`
/// against central differences. Returns one relative error per input.
pub fn check_inputs(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> Vec<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &ids);
    let grads = g.backward(out);
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids);
        g.value(out).item()
    };
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = numeric_gradient(&inputs[k], h, |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            eval(&xs)
        });
        errors.push(relative_error(analytic.data(), numeric.data(), 1e-10));
    }
    errors
}

/// Compare analytic and numeric gradients for the listed parameters of
/// `store`. Returns `(param name, relative error, analytic norm)` triples.
pub fn check_params(
    store: &ParamStore,
    params: &[ParamId],
    h: f64,
    f: impl Fn(&mut Graph, &ParamStore) -> NodeId,
) -> Vec<(String, f64, f64)> {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out).for_store(store);
    let mut work = store.clone();
    let mut results = Vec::new();
    for &pid in params {
        let analytic = grads[pid.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.get(pid).shape()));
        let base = store.get(pid).clone();
        let numeric = numeric_gradient(&base, h, |probe| {
            work.set(pid, probe.clone());
            let mut g = Graph::new();
            let out = f(&mut g, &work);
            g.value(out).item()
        });
        work.set(pid, base);
        results.push((
            store.name(pid).to_string(),
            relative_error(analytic.data(), numeric.data(), 1e-10),
            analytic.sq_norm().sqrt(),
        ));
    }
    results
}
