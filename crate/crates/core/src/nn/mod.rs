//! Neural-network building blocks on top of the tape.
//!
//! Parameters live in a flat, named [`ParamStore`]; layers only hold
//! [`ParamId`]s into it. A forward pass runs inside a [`Graph`], which binds
//! each parameter to the tape the first time it is used and maps gradients
//! back onto the store after [`Graph::backward`].

mod attention;
pub mod gradcheck;
mod layers;

pub use attention::{attention_weights, AttentionLayer, FeedForward, TransformerLayer};
pub use layers::{AdaLnBlock, LayerNorm, Linear, Mlp, ResidualBlock, LN_EPS};

use std::ops::{Deref, DerefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrite every tensor from a flat buffer laid out as [`Self::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::dim(format!(
                "flat parameter buffer has {} values, model needs {}",
                flat.len(),
                self.count()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Weight initializer: `U(±1/√fan_in)` for linear weights and biases.
pub struct Init<'a> {
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.uniform(-bound, bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// A tape plus the parameter bindings for one forward pass.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_tape(params, Tape::new())
    }

    pub fn no_grad(params: &'p ParamStore) -> Self {
        Self::with_tape(params, Tape::no_grad())
    }

    fn with_tape(params: &'p ParamStore, tape: Tape) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients for every parameter in store order; unused parameters get zeros.
    pub fn backward(self, loss: Var) -> Result<Vec<Tensor>> {
        let Graph {
            tape,
            params,
            bound,
        } = self;
        let mut grads = tape.backward(loss)?;
        Ok(bound
            .iter()
            .zip(params.tensors())
            .map(|(b, t)| {
                b.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect())
    }

    /// Rows `0..n` repeated `times` each, in order: `[0,0,..,1,1,..]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let n = self.tape.value(x).rows();
        let idx: Rc<[usize]> = (0..n).flat_map(|r| std::iter::repeat_n(r, times)).collect();
        self.tape.gather_rows(x, idx)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Adds a learnable position table to each of `batch` stacked sequences.
///
/// `tokens` is `[batch·n, d]`, `table` is `[n, d]`.
pub fn embedding_add(g: &mut Graph, tokens: Var, table: Var, batch: usize) -> Result<Var> {
    let (ts, ps) = (g.shape(tokens).to_vec(), g.shape(table).to_vec());
    if ts.len() != 2 || ps.len() != 2 || ts[1] != ps[1] || ts[0] != batch * ps[0] {
        return Err(Error::dim(format!(
            "position table {ps:?} does not fit tokens {ts:?} with batch {batch}"
        )));
    }
    let n = ps[0];
    let pos = if batch == 1 {
        table
    } else {
        let idx: Rc<[usize]> = (0..batch * n).map(|i| i % n).collect();
        g.gather_rows(table, idx)?
    };
    g.add(tokens, pos)
}
