use super::{Graph, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x · Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in_uniform(&[out_dim, in_dim], in_dim));
        let bias = store.add(format!("{name}.bias"), init.fan_in_uniform(&[out_dim], in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::dim(format!(
                "linear layer expects [_, {}], got {s:?}",
                self.in_dim
            )));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            dim,
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).last_dim() != self.dim {
            return Err(Error::dim(format!(
                "layernorm over {} features, got {:?}",
                self.dim,
                g.shape(x)
            )));
        }
        let h = g.layernorm(x, self.eps)?;
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let h = g.mul(h, gain)?;
        g.add(h, bias)
    }
}

/// Two linear layers with a SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: [usize; 3]) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dims[0], dims[1]),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), dims[1], dims[2]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, h)
    }
}

/// `x + fc2(silu(fc1(ln(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub ln: LayerNorm,
    pub branch: Mlp,
    pub width: usize,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            branch: Mlp::new(store, init, name, [width, width, width]),
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let h = self.branch.forward(g, h)?;
        g.add(x, h)
    }
}

/// Residual block whose normalized input is shifted and scaled, and whose
/// branch output is gated, by signals computed from a conditioning vector.
///
/// The gate columns of the final conditioning layer start at exactly zero,
/// so a fresh block is the identity map for every conditioning input.
#[derive(Clone, Debug)]
pub struct AdaLnBlock {
    pub inner: ResidualBlock,
    pub cond1: Linear,
    pub cond2: Linear,
}

impl AdaLnBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize) -> Self {
        let inner = ResidualBlock::new(store, init, name, width);
        let cond1 = Linear::new(store, init, &format!("{name}.cond1"), width, width);
        let cond2 = Linear::new(store, init, &format!("{name}.cond2"), width, 3 * width);
        let w = store.get_mut(cond2.weight).data_mut();
        w[2 * width * width..].fill(0.0);
        store.get_mut(cond2.bias).data_mut()[2 * width..].fill(0.0);
        Self { inner, cond1, cond2 }
    }

    pub fn width(&self) -> usize {
        self.inner.width
    }

    /// `[shift | scale | gate]` for each row of `embed`.
    pub fn modulation(&self, g: &mut Graph, embed: Var) -> Result<Var> {
        let h = g.silu(embed)?;
        let h = self.cond1.forward(g, h)?;
        let h = g.silu(h)?;
        self.cond2.forward(g, h)
    }

    /// Apply the block given per-row modulation `[rows, 3·width]`.
    pub fn forward_modulated(&self, g: &mut Graph, x: Var, modulation: Var) -> Result<Var> {
        let w = self.width();
        if g.shape(modulation) != [g.value(x).rows(), 3 * w] {
            return Err(Error::dim(format!(
                "modulation {:?} does not match input {:?}",
                g.shape(modulation),
                g.shape(x)
            )));
        }
        let shift = g.slice_cols(modulation, 0, w)?;
        let scale = g.slice_cols(modulation, w, w)?;
        let gate = g.slice_cols(modulation, 2 * w, w)?;
        let h = self.inner.ln.forward(g, x)?;
        let one = g.input(Tensor::scalar(1.0));
        let scale1 = g.add(scale, one)?;
        let h = g.mul(h, scale1)?;
        let h = g.add(h, shift)?;
        let h = self.inner.branch.forward(g, h)?;
        let h = g.mul(gate, h)?;
        g.add(x, h)
    }

    /// Convenience form taking the conditioning embedding row-aligned with `x`.
    pub fn forward(&self, g: &mut Graph, x: Var, embed: Var) -> Result<Var> {
        if g.value(embed).last_dim() != self.width() {
            return Err(Error::dim(format!(
                "conditioning width {} != block width {}",
                g.value(embed).last_dim(),
                self.width()
            )));
        }
        let m = self.modulation(g, embed)?;
        self.forward_modulated(g, x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, GradCheck};
    use crate::tensor::{NoiseDist, Rng};

    fn rand_input(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        rng.sample(NoiseDist::Gaussian, &[rows, cols]).unwrap()
    }

    #[test]
    fn layernorm_constant_row_goes_to_zero() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let mut g = Graph::no_grad(&store);
        let x = g.input(Tensor::new(&[1, 4], vec![5.0; 4]).unwrap());
        let y = ln.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layernorm_normalized_pair_unchanged() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 2);
        let mut g = Graph::no_grad(&store);
        let x = g.input(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y = ln.forward(&mut g, x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_row_moments() {
        let mut rng = Rng::new(4);
        let x = rng.sample(NoiseDist::Uniform { lo: -10.0, hi: 10.0 }, &[50, 16]).unwrap();
        let (xhat, _) = crate::tensor::kernels::layernorm(&x, LN_EPS).unwrap();
        for r in 0..50 {
            let row = xhat.row(r);
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12, "mean {m}");
            assert!((1.0 - 1e-6..=1.0).contains(&v), "var {v}");
        }
    }

    #[test]
    fn layernorm_width_one_rejected() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 1);
        let mut g = Graph::no_grad(&store);
        let x = g.input(Tensor::zeros(&[3, 1]));
        assert!(matches!(ln.forward(&mut g, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn residual_dead_branch_is_identity() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, &mut Init { rng: &mut rng }, "b", 6);
        block.branch.fc2.zero(&mut store);
        let xin = rand_input(&mut rng, 4, 6);
        let mut g = Graph::no_grad(&store);
        let x = g.input(xin.clone());
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &xin);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn residual_width_mismatch() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, &mut Init { rng: &mut rng }, "b", 6);
        let mut g = Graph::no_grad(&store);
        let x = g.input(Tensor::zeros(&[2, 5]));
        assert!(matches!(block.forward(&mut g, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn adaln_fresh_block_is_identity() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let block = AdaLnBlock::new(&mut store, &mut Init { rng: &mut rng }, "a", 8);
        for _ in 0..100 {
            let xin = rand_input(&mut rng, 1, 8);
            let cin = rand_input(&mut rng, 1, 8);
            let mut g = Graph::no_grad(&store);
            let x = g.input(xin.clone());
            let c = g.input(cin);
            let y = block.forward(&mut g, x, c).unwrap();
            assert!(g.value(y).max_abs_diff(&xin) < 1e-12);
        }
    }

    #[test]
    fn adaln_unit_gate_reduces_to_residual() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        let block = AdaLnBlock::new(&mut store, &mut Init { rng: &mut rng }, "a", 5);
        // modulation = [0 | 0 | 1]
        block.cond2.zero(&mut store);
        store.get_mut(block.cond2.bias).data_mut()[10..].fill(1.0);
        let xin = rand_input(&mut rng, 3, 5);
        let cin = rand_input(&mut rng, 3, 5);
        let mut g = Graph::no_grad(&store);
        let x = g.input(xin.clone());
        let c = g.input(cin);
        let y = block.forward(&mut g, x, c).unwrap();
        let x2 = g.input(xin);
        let r = block.inner.forward(&mut g, x2).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(r)) < 1e-15);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(100 + seed);
            let mut store = ParamStore::new();
            let mut init = Init { rng: &mut rng };
            let block = ResidualBlock::new(&mut store, &mut init, "r", 4);
            let ada = AdaLnBlock::new(&mut store, &mut init, "a", 4);
            // open the gate so the conditioning path carries gradient
            for v in store.get_mut(ada.cond2.weight).data_mut().iter_mut() {
                if *v == 0.0 {
                    *v = 0.3;
                }
            }
            let x = rand_input(&mut rng, 3, 4);
            let c = rand_input(&mut rng, 3, 4);
            let w = rand_input(&mut rng, 3, 4);
            let report: GradCheck = check_params(&store, 1e-5, |g| {
                let xv = g.input(x.clone());
                let cv = g.input(c.clone());
                let h = block.forward(g, xv)?;
                let h = ada.forward(g, h, cv)?;
                let wv = g.input(w.clone());
                let h = g.mul(h, wv)?;
                g.sum(h, None)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }
}
