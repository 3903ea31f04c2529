use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, AttnDims, Broadcast};
use super::{BinaryOp, ReduceOp, Tensor, UnaryOp};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul { a: usize, b: usize, trans_b: bool },
    Binary { op: BinaryOp, a: usize, b: usize, bc: Broadcast },
    Unary { op: UnaryOp, a: usize },
    Reduce { op: ReduceOp, a: usize, axis: Option<usize> },
    NormAlpha { a: usize, alpha: f64, eps: f64 },
    LayerNorm { a: usize, rstd: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<f64> },
    GatherRows { a: usize, idx: Rc<[usize]> },
    ConcatRows { a: usize, b: usize },
    ConcatCols { a: usize, b: usize },
    SliceCols { a: usize, start: usize },
    Reshape { a: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b, .. }
            | Op::Binary { a, b, .. }
            | Op::ConcatRows { a, b }
            | Op::ConcatCols { a, b } => vec![a, b],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::Unary { a, .. }
            | Op::Reduce { a, .. }
            | Op::NormAlpha { a, .. }
            | Op::LayerNorm { a, .. }
            | Op::GatherRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Reshape { a } => vec![a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in evaluation order so gradients can be pulled back
/// in exact reverse order.
///
/// A tape built with [`Tape::no_grad`] evaluates the same kernels but keeps
/// no backward state; it is what inference uses.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        Ok(v.idx as usize)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let (op, needs_grad) = if !self.record {
            (Op::Constant, false)
        } else {
            let ng = matches!(op, Op::Leaf) || inputs.iter().any(|&i| self.nodes[i].needs_grad);
            if ng || matches!(op, Op::Constant) {
                (op, ng)
            } else {
                (Op::Constant, false)
            }
        };
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    /// A trainable input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let op = if self.record { Op::Leaf } else { Op::Constant };
        self.push(t, op)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx as usize].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; the natural form for `x · Wᵀ` with `W` stored `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value, trans_b)?;
        Ok(self.push(out, Op::MatMul { a: ia, b: ib, trans_b }))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (bc, _) = kernels::classify_broadcast(self.nodes[ia].value.shape(), self.nodes[ib].value.shape())?;
        let out = kernels::binary(op, &self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Binary { op, a: ia, b: ib, bc }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = kernels::unary(op, &self.nodes[ia].value);
        Ok(self.push(out, Op::Unary { op, a: ia }))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(UnaryOp::Pow(p), a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = kernels::reduce(op, &self.nodes[ia].value, axis)?;
        Ok(self.push(out, Op::Reduce { op, a: ia, axis }))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    /// `(Σ v² + eps)^(α/2)` over the last axis; a vector gives a scalar, a
    /// matrix gives one value per row.
    pub fn norm_alpha(&mut self, a: Var, alpha: f64, eps: f64) -> Result<Var> {
        super::check_alpha(alpha, eps)?;
        let ia = self.idx(a)?;
        let out = kernels::norm_alpha_rows(&self.nodes[ia].value, alpha, eps);
        Ok(self.push(out, Op::NormAlpha { a: ia, alpha, eps }))
    }

    /// Zero-mean, unit-variance normalization of the last axis (no affine).
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let (out, rstd) = kernels::layernorm(&self.nodes[ia].value, eps)?;
        Ok(self.push(out, Op::LayerNorm { a: ia, rstd }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let want = [dims.batch * dims.seq, dims.width()];
        for i in [iq, ik, iv] {
            if self.nodes[i].value.shape() != want {
                return Err(Error::dim(format!(
                    "attention input {:?}, expected {want:?}",
                    self.nodes[i].value.shape()
                )));
            }
        }
        let (out, probs) = kernels::attention(
            self.nodes[iq].value.data(),
            self.nodes[ik].value.data(),
            self.nodes[iv].value.data(),
            dims,
        );
        let out = Tensor::from_parts(want.to_vec(), out);
        let probs = if self.record { probs } else { Vec::new() };
        Ok(self.push(out, Op::Attention { q: iq, k: ik, v: iv, dims, probs }))
    }

    /// Row `i` of the output is row `idx[i]` of `a` (viewed as a matrix).
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let c = src.last_dim();
        let rows = src.rows();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            if r >= rows {
                return Err(Error::dim(format!("row {r} out of range for {rows} rows")));
            }
            out.extend_from_slice(src.row(r));
        }
        let out = Tensor::from_parts(vec![idx.len(), c], out);
        Ok(self.push(out, Op::GatherRows { a: ia, idx }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.rank() != 2 || y.rank() != 2 || x.last_dim() != y.last_dim() {
            return Err(Error::dim(format!("concat_rows of {:?} and {:?}", x.shape(), y.shape())));
        }
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let out = Tensor::from_parts(vec![x.rows() + y.rows(), x.last_dim()], data);
        Ok(self.push(out, Op::ConcatRows { a: ia, b: ib }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
            return Err(Error::dim(format!("concat_cols of {:?} and {:?}", x.shape(), y.shape())));
        }
        let (p, q) = (x.last_dim(), y.last_dim());
        let mut data = Vec::with_capacity(x.numel() + y.numel());
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let out = Tensor::from_parts(vec![x.rows(), p + q], data);
        Ok(self.push(out, Op::ConcatCols { a: ia, b: ib }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.rank() != 2 || start + len > x.last_dim() || len == 0 {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![x.rows(), len], data);
        Ok(self.push(out, Op::SliceCols { a: ia, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a: ia }))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::contract("backward on a tape that does not record"));
        }
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(node, &g) {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (Op::Leaf, None) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = node.value.shape()[1];
                let mut ga = vec![0.0; m * k];
                let mut out = Vec::with_capacity(2);
                if self.nodes[a].needs_grad {
                    // dA = dC · op(B)ᵀ
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    kernels::gemm(m, n, k, g, (n, 1), val(b).data(), bs, 0.0, &mut ga);
                    out.push((a, ga));
                }
                if self.nodes[b].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    if trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        kernels::gemm(n, m, k, g, (1, n), val(a).data(), (k, 1), 0.0, &mut gb);
                    } else {
                        // dB = Aᵀ · dC
                        kernels::gemm(k, m, n, val(a).data(), (1, k), g, (n, 1), 0.0, &mut gb);
                    }
                    out.push((b, gb));
                }
                out
            }
            &Op::Binary { op, a, b, bc } => {
                let (x, y) = (val(a).data(), val(b).data());
                let at = |d: &[f64], i: usize| d[i % d.len()];
                let ga: Vec<f64> = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g.iter().enumerate().map(|(i, g)| g * at(y, i)).collect(),
                };
                let gb: Vec<f64> = match op {
                    BinaryOp::Add => g.to_vec(),
                    BinaryOp::Sub => g.iter().map(|g| -g).collect(),
                    BinaryOp::Mul => g.iter().enumerate().map(|(i, g)| g * at(x, i)).collect(),
                };
                let a_rep = matches!(bc, Broadcast::LhsScalar | Broadcast::LhsRow);
                let b_rep = matches!(bc, Broadcast::RhsScalar | Broadcast::RhsRow);
                vec![
                    (a, kernels::unbroadcast(&ga, x.len(), a_rep)),
                    (b, kernels::unbroadcast(&gb, y.len(), b_rep)),
                ]
            }
            &Op::Unary { op, a } => vec![(a, kernels::unary_grad(op, val(a).data(), g))],
            &Op::Reduce { op, a, axis } => {
                let src = val(a);
                let gi = match axis {
                    None => {
                        let s = match op {
                            ReduceOp::Sum => g[0],
                            ReduceOp::Mean => g[0] / src.numel() as f64,
                        };
                        vec![s; src.numel()]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = kernels::axis_split(src.shape(), ax);
                        let f = match op {
                            ReduceOp::Sum => 1.0,
                            ReduceOp::Mean => 1.0 / len as f64,
                        };
                        let mut out = vec![0.0; src.numel()];
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    out[(o * len + l) * inner + i] = f * g[o * inner + i];
                                }
                            }
                        }
                        out
                    }
                };
                vec![(a, gi)]
            }
            &Op::NormAlpha { a, alpha, eps } => {
                let src = val(a);
                vec![(
                    a,
                    kernels::norm_alpha_rows_grad(src.data(), src.last_dim(), g, alpha, eps),
                )]
            }
            Op::LayerNorm { a, rstd } => vec![(
                *a,
                kernels::layernorm_grad(node.value.data(), rstd, node.value.last_dim(), g),
            )],
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = kernels::attention_grad(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g,
                    *dims,
                );
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::GatherRows { a, idx } => {
                let src = val(*a);
                let c = src.last_dim();
                let mut out = vec![0.0; src.numel()];
                for (i, &r) in idx.iter().enumerate() {
                    for (o, gv) in out[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *o += gv;
                    }
                }
                vec![(*a, out)]
            }
            &Op::ConcatRows { a, b } => {
                let na = val(a).numel();
                vec![(a, g[..na].to_vec()), (b, g[na..].to_vec())]
            }
            &Op::ConcatCols { a, b } => {
                let (p, q) = (val(a).last_dim(), val(b).last_dim());
                let mut ga = Vec::with_capacity(val(a).numel());
                let mut gb = Vec::with_capacity(val(b).numel());
                for row in g.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![(a, ga), (b, gb)]
            }
            &Op::SliceCols { a, start } => {
                let src = val(a);
                let c = src.last_dim();
                let len = node.value.last_dim();
                let mut out = vec![0.0; src.numel()];
                for (r, gr) in g.chunks(len).enumerate() {
                    out[r * c + start..r * c + start + len].copy_from_slice(gr);
                }
                vec![(a, out)]
            }
            &Op::Reshape { a } => vec![(a, g.to_vec())],
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` for non-leaf or foreign variables.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx as usize).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx as usize).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let s = t.sum(x, None).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn norm_gradient_is_unit_vector() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let n = t.norm_alpha(x, 1.0, 0.0).unwrap();
        assert_eq!(t.value(n).item().unwrap(), 5.0);
        let g = t.backward(n).unwrap();
        let g = g.get(x).unwrap().data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn norm_alpha_finite_at_origin_with_eps() {
        for alpha in [0.1, 0.5, 1.0, 1.5, 2.0] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::zeros(&[4]));
            let n = t.norm_alpha(x, alpha, 1e-8).unwrap();
            assert!(t.value(n).is_finite());
            let g = t.backward(n).unwrap();
            assert!(g.get(x).unwrap().is_finite());
        }
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.scale(x, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_input_accumulates() {
        // d/dx (x * x) = 2x
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]));
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y, None).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut t = Tape::no_grad();
        let x = t.leaf(Tensor::scalar(2.0));
        assert!(t.backward(x).is_err());
    }
}
