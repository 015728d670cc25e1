//! Computation graphs over [`Tensor`]s.
//!
//! Model code is written once against the [`Graph`] trait and runs on two
//! backends: [`Eval`] computes values and drops intermediates, [`Tape`]
//! records every primitive so that [`Tape::backward`] can replay it in
//! reverse. Both call the same forward kernels, so a taped forward pass and
//! an untaped one produce bit-identical values.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::{Gradients, NnError, ParamId, ParamStore, Tensor};

/// Sentinel in an [`IndexMap`] that reads as `0.0`.
pub const ZERO_INDEX: u32 = u32::MAX;

/// A re-indexing `out[i] = src[idx[i]]` with zero fill for [`ZERO_INDEX`].
///
/// Covers row/column splitting, interleaving, slicing and context
/// extraction. Its adjoint is a scatter-add.
#[derive(Clone, Debug)]
pub struct IndexMap {
    shape: Vec<usize>,
    src_len: usize,
    idx: Vec<u32>,
}

impl IndexMap {
    pub fn new(shape: Vec<usize>, src_len: usize, idx: Vec<u32>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(NnError::Shape(format!("index map shape {shape:?} vs {} indices", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&i| i != ZERO_INDEX && i as usize >= src_len) {
            return Err(NnError::Shape(format!("index {bad} out of range for source of {src_len}")));
        }
        Ok(Self { shape, src_len, idx })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn indices(&self) -> &[u32] {
        &self.idx
    }

    fn apply(&self, src: &Tensor) -> Result<Tensor, NnError> {
        if src.len() != self.src_len {
            return Err(NnError::Shape(format!(
                "gather expects a source of {} values, got {:?}",
                self.src_len,
                src.shape()
            )));
        }
        let s = src.data();
        let data = self
            .idx
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { s[i as usize] })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    fn adjoint(&self, g: &Tensor, src_shape: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(src_shape);
        let o = out.data_mut();
        for (&i, &v) in self.idx.iter().zip(g.data()) {
            if i != ZERO_INDEX {
                o[i as usize] += v;
            }
        }
        out
    }
}

/// A fused primitive with a hand-written vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NnError>;
    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, d_out: &Tensor)
        -> Result<Vec<Tensor>, NnError>;
}

/// Operations available to model code.
pub trait Graph {
    type Value: Clone;

    fn store(&self) -> &ParamStore;
    fn constant(&mut self, t: Tensor) -> Self::Value;
    fn param(&mut self, id: ParamId) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NnError>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NnError>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NnError>;
    fn scale(&mut self, a: &Self::Value, k: f64) -> Self::Value;
    fn offset(&mut self, a: &Self::Value, k: f64) -> Self::Value;
    fn tanh(&mut self, a: &Self::Value) -> Self::Value;
    fn softplus(&mut self, a: &Self::Value) -> Self::Value;
    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value, NnError>;
    fn linear(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value, NnError>;
    fn gather(&mut self, x: &Self::Value, map: &Arc<IndexMap>) -> Result<Self::Value, NnError>;
    /// Flat concatenation of all parts, reshaped to `shape`.
    fn concat(&mut self, parts: &[&Self::Value], shape: &[usize]) -> Result<Self::Value, NnError>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value, NnError>;
    fn sum(&mut self, x: &Self::Value) -> Self::Value;
    fn custom(
        &mut self,
        op: Arc<dyn CustomOp>,
        inputs: &[&Self::Value],
    ) -> Result<Self::Value, NnError>;

    /// Mean of squared differences.
    fn mse(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NnError> {
        let n = self.value(a).len().max(1);
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        let s = self.sum(&sq);
        Ok(self.scale(&s, 1.0 / n as f64))
    }
}

fn concat_values(parts: &[&Tensor], shape: &[usize]) -> Result<Tensor, NnError> {
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape.to_vec(), data)
}

/// Untaped evaluation: values only.
pub struct Eval<'s> {
    store: &'s ParamStore,
}

impl<'s> Eval<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store }
    }
}

impl Graph for Eval<'_> {
    type Value = Tensor;

    fn store(&self) -> &ParamStore {
        self.store
    }
    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, id: ParamId) -> Tensor {
        self.store.value(id).clone()
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
        a.zip_map(b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
        a.zip_map(b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
        a.zip_map(b, |x, y| x * y)
    }
    fn scale(&mut self, a: &Tensor, k: f64) -> Tensor {
        a.map(|x| x * k)
    }
    fn offset(&mut self, a: &Tensor, k: f64) -> Tensor {
        a.map(|x| x + k)
    }
    fn tanh(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::tanh)
    }
    fn softplus(&mut self, a: &Tensor) -> Tensor {
        a.map(kernels::softplus)
    }
    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
        kernels::conv2d(x, w, b)
    }
    fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
        kernels::linear(x, w, b)
    }
    fn gather(&mut self, x: &Tensor, map: &Arc<IndexMap>) -> Result<Tensor, NnError> {
        map.apply(x)
    }
    fn concat(&mut self, parts: &[&Tensor], shape: &[usize]) -> Result<Tensor, NnError> {
        concat_values(parts, shape)
    }
    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor, NnError> {
        x.clone().reshape(shape)
    }
    fn sum(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.sum())
    }
    fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[&Tensor]) -> Result<Tensor, NnError> {
        op.forward(inputs)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Softplus(usize),
    Conv2d(usize, usize, usize),
    Linear(usize, usize, usize),
    Gather(usize, Arc<IndexMap>),
    Concat(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Custom(Arc<dyn CustomOp>, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording graph for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, which is a topological order;
/// [`Tape::backward`] walks them from the loss towards the leaves.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradients of the scalar `loss` with respect to every parameter it
    /// depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(NnError::NotScalar(root.value.shape().to_vec()));
        }
        let mut out = Gradients::new(self.store.len());
        if !root.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add(*id, &g),
                Op::Add(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        send(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        send(&mut grads, *b, g.map(|v| -v));
                    }
                    if needs(*a) {
                        send(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, g.zip_map(&self.nodes[*b].value, |x, y| x * y)?);
                    }
                    if needs(*b) {
                        send(&mut grads, *b, g.zip_map(&self.nodes[*a].value, |x, y| x * y)?);
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    send(&mut grads, *a, g.map(|v| v * k));
                }
                Op::Offset(a) => send(&mut grads, *a, g),
                Op::Tanh(a) => {
                    send(&mut grads, *a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))?)
                }
                Op::Softplus(a) => send(
                    &mut grads,
                    *a,
                    g.zip_map(&self.nodes[*a].value, |d, x| d * kernels::sigmoid(x))?,
                ),
                Op::Conv2d(x, w, b) => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &self.nodes[*b].value,
                        &g,
                        needs(*x),
                    )?;
                    if let Some(dx) = dx {
                        send(&mut grads, *x, dx);
                    }
                    if needs(*w) {
                        send(&mut grads, *w, dw);
                    }
                    if needs(*b) {
                        send(&mut grads, *b, db);
                    }
                }
                Op::Linear(x, w, b) => {
                    let (dx, dw, db) = kernels::linear_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &self.nodes[*b].value,
                        &g,
                        needs(*x),
                    )?;
                    if let Some(dx) = dx {
                        send(&mut grads, *x, dx);
                    }
                    if needs(*w) {
                        send(&mut grads, *w, dw);
                    }
                    if needs(*b) {
                        send(&mut grads, *b, db);
                    }
                }
                Op::Gather(x, map) => {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    send(&mut grads, *x, map.adjoint(&g, &shape));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let src = &self.nodes[p].value;
                        let n = src.len();
                        if needs(p) {
                            let slice = g.data()[offset..offset + n].to_vec();
                            send(&mut grads, p, Tensor::new(src.shape().to_vec(), slice)?);
                        }
                        offset += n;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    send(&mut grads, *a, g.reshape(&shape)?);
                }
                Op::Sum(a) => {
                    let src = &self.nodes[*a].value;
                    send(&mut grads, *a, Tensor::filled(src.shape(), g.item()));
                }
                Op::Custom(op, inputs) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let dins = op.backward(&vals, &node.value, &g)?;
                    for (&j, d) in inputs.iter().zip(dins) {
                        if needs(j) {
                            send(&mut grads, j, d);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn send(grads: &mut [Option<Tensor>], j: usize, t: Tensor) {
    match &mut grads[j] {
        Some(acc) => acc.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

impl Graph for Tape<'_> {
    type Value = Var;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&i) = self.param_nodes.get(&id) {
            return Var(i);
        }
        let value = self.store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad: true });
        let i = self.nodes.len() - 1;
        self.param_nodes.insert(id, i);
        Var(i)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, NnError> {
        let v = self.val(*a).zip_map(self.val(*b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var, NnError> {
        let v = self.val(*a).zip_map(self.val(*b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, NnError> {
        let v = self.val(*a).zip_map(self.val(*b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    fn scale(&mut self, a: &Var, k: f64) -> Var {
        let v = self.val(*a).map(|x| x * k);
        self.push(v, Op::Scale(a.0, k), &[a.0])
    }

    fn offset(&mut self, a: &Var, k: f64) -> Var {
        let v = self.val(*a).map(|x| x + k);
        self.push(v, Op::Offset(a.0), &[a.0])
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0), &[a.0])
    }

    fn softplus(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(kernels::softplus);
        self.push(v, Op::Softplus(a.0), &[a.0])
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var, NnError> {
        let v = kernels::conv2d(self.val(*x), self.val(*w), self.val(*b))?;
        Ok(self.push(v, Op::Conv2d(x.0, w.0, b.0), &[x.0, w.0, b.0]))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var, NnError> {
        let v = kernels::linear(self.val(*x), self.val(*w), self.val(*b))?;
        Ok(self.push(v, Op::Linear(x.0, w.0, b.0), &[x.0, w.0, b.0]))
    }

    fn gather(&mut self, x: &Var, map: &Arc<IndexMap>) -> Result<Var, NnError> {
        let v = map.apply(self.val(*x))?;
        Ok(self.push(v, Op::Gather(x.0, Arc::clone(map)), &[x.0]))
    }

    fn concat(&mut self, parts: &[&Var], shape: &[usize]) -> Result<Var, NnError> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(**p)).collect();
        let v = concat_values(&vals, shape)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(v, Op::Concat(idx.clone()), &idx))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var, NnError> {
        let v = self.val(*x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x.0), &[x.0]))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let v = Tensor::scalar(self.val(*x).sum());
        self.push(v, Op::Sum(x.0), &[x.0])
    }

    fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[&Var]) -> Result<Var, NnError> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.val(**v)).collect();
        let v = op.forward(&vals)?;
        let idx: Vec<usize> = inputs.iter().map(|p| p.0).collect();
        Ok(self.push(v, Op::Custom(op, idx.clone()), &idx))
    }
}
