use super::{Graph, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnDims};
use crate::tensor::{Tensor, Var};

/// Multi-head self-attention over every token of each sequence (no mask).
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::param(format!(
                "width {width} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.query"), width, width),
            key: Linear::new(store, init, &format!("{name}.key"), width, width),
            value: Linear::new(store, init, &format!("{name}.value"), width, width),
            output: Linear::new(store, init, &format!("{name}.output"), width, width),
            heads,
            head_dim: width / heads,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `tokens` holds `batch` sequences stacked row-wise, `[batch·seq, width]`.
    pub fn forward(&self, g: &mut Graph, tokens: Var, batch: usize) -> Result<Var> {
        let rows = g.value(tokens).rows();
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::dim(format!("{rows} token rows do not split into {batch} sequences")));
        }
        let dims = AttnDims {
            batch,
            seq: rows / batch,
            heads: self.heads,
            head_dim: self.head_dim,
        };
        let q = self.query.forward(g, tokens)?;
        let k = self.key.forward(g, tokens)?;
        let v = self.value.forward(g, tokens)?;
        let o = g.attention(q, k, v, dims)?;
        self.output.forward(g, o)
    }
}

/// Softmax attention weights `[heads, n, n]` of one sequence; used to inspect
/// the layer rather than to compute with it.
pub fn attention_weights(layer: &AttentionLayer, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
    let mut g = Graph::no_grad(store);
    let x = g.input(tokens.clone());
    let q = layer.query.forward(&mut g, x)?;
    let k = layer.key.forward(&mut g, x)?;
    let v = layer.value.forward(&mut g, x)?;
    let n = tokens.rows();
    let dims = AttnDims {
        batch: 1,
        seq: n,
        heads: layer.heads,
        head_dim: layer.head_dim,
    };
    let (_, probs) = kernels::attention(g.value(q).data(), g.value(k).data(), g.value(v).data(), dims);
    Tensor::new(&[layer.heads, n, n], probs)
}

pub type FeedForward = Mlp;

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: AttentionLayer,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attn: AttentionLayer::new(store, init, &format!("{name}.attn"), width, heads)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width),
            ff: Mlp::new(store, init, &format!("{name}.ff"), [width, 4 * width, width]),
        })
    }

    /// Zero the output projections so the layer passes its input through.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        self.attn.output.zero(store);
        self.ff.fc2.zero(store);
    }

    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let h = self.attn.forward(g, h, batch)?;
        let x = g.add(x, h)?;
        let h = self.ln_ff.forward(g, x)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::tensor::{NoiseDist, Rng};

    fn layer(seed: u64, width: usize, heads: usize) -> (ParamStore, AttentionLayer, Rng) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let l = AttentionLayer::new(&mut store, &mut Init { rng: &mut rng }, "att", width, heads).unwrap();
        (store, l, rng)
    }

    #[test]
    fn single_token_is_value_then_output_projection() {
        let (store, l, mut rng) = layer(1, 8, 2);
        let tok = rng.sample(NoiseDist::Gaussian, &[1, 8]).unwrap();
        let mut g = Graph::no_grad(&store);
        let x = g.input(tok);
        let y = l.forward(&mut g, x, 1).unwrap();
        let v = l.value.forward(&mut g, x).unwrap();
        let expect = l.output.forward(&mut g, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-14);
    }

    #[test]
    fn duplicate_rows_give_duplicate_outputs() {
        let (store, l, mut rng) = layer(2, 8, 4);
        let mut tok = rng.sample(NoiseDist::Gaussian, &[4, 8]).unwrap();
        let r0 = tok.row(0).to_vec();
        tok.data_mut()[16..24].copy_from_slice(&r0);
        let mut g = Graph::no_grad(&store);
        let x = g.input(tok);
        let y = l.forward(&mut g, x, 1).unwrap();
        let out = g.value(y);
        for c in 0..8 {
            assert!((out.at(0, c) - out.at(2, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (store, l, mut rng) = layer(3, 12, 3);
        let tok = rng.sample(NoiseDist::Gaussian, &[7, 12]).unwrap();
        let w = attention_weights(&l, &store, &tok).unwrap();
        for row in w.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (store, l, mut rng) = layer(4, 8, 2);
        let tok = rng.sample(NoiseDist::Gaussian, &[5, 8]).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut ptok = Vec::new();
        for &p in &perm {
            ptok.extend_from_slice(tok.row(p));
        }
        let ptok = Tensor::new(&[5, 8], ptok).unwrap();
        let mut g = Graph::no_grad(&store);
        let x = g.input(tok);
        let px = g.input(ptok);
        let y = l.forward(&mut g, x, 1).unwrap();
        let py = l.forward(&mut g, px, 1).unwrap();
        let (y, py) = (g.value(y).clone(), g.value(py).clone());
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((py.at(i, c) - y.at(p, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = Rng::new(0);
        let mut store = ParamStore::new();
        assert!(AttentionLayer::new(&mut store, &mut Init { rng: &mut rng }, "a", 10, 4).is_err());
    }

    #[test]
    fn transformer_layer_gradcheck_batched() {
        let mut rng = Rng::new(7);
        let mut store = ParamStore::new();
        let l = TransformerLayer::new(&mut store, &mut Init { rng: &mut rng }, "t", 6, 2).unwrap();
        let x = rng.sample(NoiseDist::Gaussian, &[8, 6]).unwrap();
        let w = rng.sample(NoiseDist::Gaussian, &[8, 6]).unwrap();
        let rep = gradcheck::check(&store, &[x], 1e-5, Some((6, 1)), |g, v| {
            let y = l.forward(g, v[0], 2)?;
            let wv = g.input(w.clone());
            let y = g.mul(y, wv)?;
            g.sum(y, None)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
