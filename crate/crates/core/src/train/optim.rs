use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// First and second moments for every parameter, flattened in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let n = params.count();
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// AdamW: weight decay is applied to the parameter directly (decoupled),
/// then the bias-corrected Adam step. Decay only touches matrices; biases,
/// norm gains and 1-D tensors are left alone.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter tensor");
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let mut off = 0;
    for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
        assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
        let decay = if p.rank() >= 2 { cfg.weight_decay } else { 0.0 };
        let n = p.numel();
        let (m, v) = (&mut state.m[off..off + n], &mut state.v[off..off + n]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *w *= 1.0 - lr * decay;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
        }
        off += n;
    }
}
