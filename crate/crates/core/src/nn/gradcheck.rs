//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever calls the forward closure on a no-grad graph, so it
//! shares no code with the backward rules it checks.

use super::{Graph, ParamStore};
use crate::error::Result;
use crate::tensor::{Rng, Tensor, Var};

/// Denominator floor for the relative error, so that components whose true
/// value is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(tensor index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    fn record(&mut self, t: usize, e: usize, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.checked += 1;
        if self.worst.is_none() || rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((t, e, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst);
        }
    }
}

/// Check every parameter element of `store`.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    check(store, &[], h, None, |g, _| f(g))
}

/// Check parameters and extra leaf `inputs`. With `per_tensor = Some((n, seed))`
/// only `n` randomly chosen elements of each tensor are perturbed.
pub fn check<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    h: f64,
    per_tensor: Option<(usize, u64)>,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let Graph { tape, params, bound } = g;
    let mut gr = tape.backward(loss)?;
    let param_grads: Vec<Tensor> = bound
        .iter()
        .zip(params.tensors())
        .map(|(b, t)| b.and_then(|v| gr.take(v)).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let input_grads: Vec<Tensor> = vars.iter().map(|&v| gr.take(v).expect("input leaf")).collect();

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut rng = per_tensor.map(|(_, seed)| Rng::new(seed));
    let mut pick = |n: usize| -> Vec<usize> {
        match (per_tensor, rng.as_mut()) {
            (Some((k, _)), Some(rng)) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        }
    };

    let mut report = GradCheck::default();
    let mut work = store.clone();
    for (ti, grad) in param_grads.iter().enumerate() {
        for e in pick(grad.numel()) {
            let orig = work.tensors()[ti].data()[e];
            work.tensors_mut()[ti].data_mut()[e] = orig + h;
            let up = eval(&work, inputs)?;
            work.tensors_mut()[ti].data_mut()[e] = orig - h;
            let down = eval(&work, inputs)?;
            work.tensors_mut()[ti].data_mut()[e] = orig;
            report.record(ti, e, grad.data()[e], (up - down) / (2.0 * h));
        }
    }
    let mut xs = inputs.to_vec();
    for (ii, grad) in input_grads.iter().enumerate() {
        for e in pick(grad.numel()) {
            let orig = xs[ii].data()[e];
            xs[ii].data_mut()[e] = orig + h;
            let up = eval(store, &xs)?;
            xs[ii].data_mut()[e] = orig - h;
            let down = eval(store, &xs)?;
            xs[ii].data_mut()[e] = orig;
            report.record(store.len() + ii, e, grad.data()[e], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
