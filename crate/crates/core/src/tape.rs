//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records an append-only sequence of primitive operations during
//! the forward pass. [`Tape::backward`] walks the records in strict reverse
//! order, accumulating adjoints into each operation's inputs in a fixed
//! sequence, so gradients for a given tape are reproducible bit for bit.
//! Backward consumes the tape: a second call is an error, and forward values
//! are freed once the pass completes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a recorded operation on one tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Handle to a trainable parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    OneMinus(NodeId),
    /// Elementwise product with a 1x1 node's value.
    ScalarMul(NodeId, NodeId),
    /// Product with a compile-time constant.
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Slice { input: NodeId, offset: usize },
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    PickRow { input: NodeId, row: usize },
}

struct Node<F> {
    op: Op,
    value: Tensor<F>,
}

/// Named trainable parameters with persistent gradient buffers.
///
/// Parameters keep their registration order; every iteration over the store
/// (optimizer steps, checkpoint serialization, gradient clipping) follows that
/// order, which makes those consumers deterministic.
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, u32>,
}

struct ParamEntry<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len() as u32;
        self.by_name.insert(name.to_string(), id);
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.index()].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.index()].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.index()].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.index()].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.index()].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = F::zero();
            }
        }
    }

    /// Total parameter element count.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<ParamId, NodeId>,
    consumed: bool,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        assert!(!self.consumed, "tape values are freed after backward");
        &self.nodes[id.index()].value
    }

    fn guard(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("cannot record on a consumed tape".into()));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor<F>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value });
        id
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Result<NodeId> {
        self.guard()?;
        Ok(self.push(Op::Leaf, value))
    }

    /// Record a parameter read. Repeated reads of the same parameter reuse
    /// the node recorded first, so each parameter appears on the tape once
    /// and its adjoint accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<NodeId> {
        self.guard()?;
        if let Some(&n) = self.param_nodes.get(&id) {
            return Ok(n);
        }
        let n = self.push(Op::Param(id), store.value(id).clone());
        self.param_nodes.insert(id, n);
        Ok(n)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(a).div(self.value(b))?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).one_minus();
        Ok(self.push(Op::OneMinus(x), v))
    }

    pub fn scalar_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.guard()?;
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch(
                "scalar_mul multiplier must be 1x1".into(),
            ));
        }
        let sv = self.value(s).item();
        let v = self.value(x).scale(sv);
        Ok(self.push(Op::ScalarMul(x, s), v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).scale(F::from_f64(c));
        Ok(self.push(Op::Scale(x, c), v))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).tanh();
        Ok(self.push(Op::Tanh(x), v))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).sigmoid();
        Ok(self.push(Op::Sigmoid(x), v))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).softmax();
        Ok(self.push(Op::Softmax(x), v))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).log_softmax();
        Ok(self.push(Op::LogSoftmax(x), v))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).sum();
        Ok(self.push(Op::Sum(x), v))
    }

    pub fn slice(&mut self, x: NodeId, offset: usize, len: usize) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).slice_flat(offset, len)?;
        Ok(self.push(Op::Slice { input: x, offset }, v))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.guard()?;
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors);
        Ok(self.push(Op::Concat(parts.to_vec()), v))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).reshape(rows, cols)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn pick_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        self.guard()?;
        let v = self.value(x).pick_row(row)?;
        Ok(self.push(Op::PickRow { input: x, row }, v))
    }

    /// Reverse pass from a scalar seed node.
    ///
    /// Adjoints are propagated by walking node indices in strictly descending
    /// order; contributions to a shared input therefore accumulate in a fixed
    /// sequence. Parameter adjoints are added into the store's gradient
    /// buffers, which persist across tapes until `zero_grads`. The tape is
    /// consumed and its forward values are freed.
    pub fn backward(&mut self, seed: NodeId, store: &mut ParamStore<F>) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward called on a consumed tape".into()));
        }
        let seed_idx = seed.index();
        if seed_idx >= self.nodes.len() {
            return Err(Error::Tape("backward seed is not on this tape".into()));
        }
        if self.nodes[seed_idx].value.len() != 1 {
            return Err(Error::Tape("backward seed must be a scalar node".into()));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Tensor<F>>> = Vec::with_capacity(seed_idx + 1);
        adj.resize_with(seed_idx + 1, || None);
        {
            let s = &self.nodes[seed_idx].value;
            adj[seed_idx] = Some(Tensor::filled(s.rows(), s.cols(), F::one()));
        }
        // Transposes of matmul operands, computed once per node per pass.
        let mut tcache: HashMap<NodeId, Tensor<F>> = HashMap::new();

        for idx in (0..=seed_idx).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    store.grad_mut(pid).add_assign(&dy)?;
                }
                Op::MatMul(a, b) => {
                    if !tcache.contains_key(&b) {
                        tcache.insert(b, self.nodes[b.index()].value.transposed());
                    }
                    let da = dy.matmul(&tcache[&b])?;
                    if !tcache.contains_key(&a) {
                        tcache.insert(a, self.nodes[a.index()].value.transposed());
                    }
                    let db = tcache[&a].matmul(&dy)?;
                    accum(&mut adj, a, da)?;
                    accum(&mut adj, b, db)?;
                }
                Op::Add(a, b) => {
                    accum(&mut adj, a, dy.clone())?;
                    accum(&mut adj, b, dy)?;
                }
                Op::Sub(a, b) => {
                    accum(&mut adj, a, dy.clone())?;
                    accum(&mut adj, b, dy.scale(-F::one()))?;
                }
                Op::Mul(a, b) => {
                    let da = dy.mul(&self.nodes[b.index()].value)?;
                    let db = dy.mul(&self.nodes[a.index()].value)?;
                    accum(&mut adj, a, da)?;
                    accum(&mut adj, b, db)?;
                }
                Op::Div(a, b) => {
                    let bval = &self.nodes[b.index()].value;
                    let da = dy.div(bval)?;
                    let y = &self.nodes[idx].value;
                    let db = dy.mul(y)?.div(bval)?.scale(-F::one());
                    accum(&mut adj, a, da)?;
                    accum(&mut adj, b, db)?;
                }
                Op::OneMinus(x) => {
                    accum(&mut adj, x, dy.scale(-F::one()))?;
                }
                Op::ScalarMul(x, s) => {
                    let sv = self.nodes[s.index()].value.item();
                    let dx = dy.scale(sv);
                    let ds = dy.mul(&self.nodes[x.index()].value)?.sum();
                    accum(&mut adj, x, dx)?;
                    accum(&mut adj, s, ds)?;
                }
                Op::Scale(x, c) => {
                    accum(&mut adj, x, dy.scale(F::from_f64(c)))?;
                }
                Op::Tanh(x) => {
                    let deriv = self.nodes[idx].value.map(|v| F::one() - v * v);
                    accum(&mut adj, x, dy.mul(&deriv)?)?;
                }
                Op::Sigmoid(x) => {
                    let deriv = self.nodes[idx].value.map(|v| v * (F::one() - v));
                    accum(&mut adj, x, dy.mul(&deriv)?)?;
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[idx].value;
                    let mut dot = F::zero();
                    for (&d, &p) in dy.data().iter().zip(y.data()) {
                        dot = dot + d * p;
                    }
                    let dx = Tensor::new(
                        y.rows(),
                        y.cols(),
                        dy.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&d, &p)| p * (d - dot))
                            .collect(),
                    )?;
                    accum(&mut adj, x, dx)?;
                }
                Op::LogSoftmax(x) => {
                    let y = &self.nodes[idx].value;
                    let mut total = F::zero();
                    for &d in dy.data() {
                        total = total + d;
                    }
                    let dx = Tensor::new(
                        y.rows(),
                        y.cols(),
                        dy.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&d, &l)| d - l.exp() * total)
                            .collect(),
                    )?;
                    accum(&mut adj, x, dx)?;
                }
                Op::Sum(x) => {
                    let xv = &self.nodes[x.index()].value;
                    let dx = Tensor::filled(xv.rows(), xv.cols(), dy.item());
                    accum(&mut adj, x, dx)?;
                }
                Op::Slice { input, offset } => {
                    let xv = &self.nodes[input.index()].value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, &d) in dy.data().iter().enumerate() {
                        dx.data_mut()[offset + i] = d;
                    }
                    accum(&mut adj, input, dx)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &self.nodes[p.index()].value;
                        let part_len = pv.len();
                        let chunk = dy.slice_flat(offset, part_len)?;
                        let dx = chunk.reshape(pv.rows(), pv.cols())?;
                        offset += part_len;
                        accum(&mut adj, p, dx)?;
                    }
                }
                Op::Reshape(x) => {
                    let xv = &self.nodes[x.index()].value;
                    accum(&mut adj, x, dy.reshape(xv.rows(), xv.cols())?)?;
                }
                Op::PickRow { input, row } => {
                    let xv = &self.nodes[input.index()].value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    let start = row * xv.cols();
                    for (i, &d) in dy.data().iter().enumerate() {
                        dx.data_mut()[start + i] = d;
                    }
                    accum(&mut adj, input, dx)?;
                }
            }
        }

        self.nodes.clear();
        self.param_nodes.clear();
        Ok(())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn accum<F: Scalar>(
    adj: &mut [Option<Tensor<F>>],
    id: NodeId,
    delta: Tensor<F>,
) -> Result<()> {
    match &mut adj[id.index()] {
        Some(t) => t.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, v)| store.register(n, v.clone()).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn param_nodes_are_deduplicated() {
        let (store, ids) = store_with(&[("p", Tensor::row(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let a = tape.param(&store, ids[0]).unwrap();
        let b = tape.param(&store, ids[0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.register("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn tanh_gradient_matches_closed_form() {
        let (mut store, ids) = store_with(&[("x", Tensor::scalar(0.7))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]).unwrap();
        let y = tape.tanh(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let want = 1.0 - 0.7f64.tanh().powi(2);
        assert!((store.grad(ids[0]).item() - want).abs() < 1e-15);
    }

    #[test]
    fn shared_param_adjoints_accumulate() {
        // loss = sum(p) + sum(p * p) gives dloss/dp = 1 + 2p.
        let (mut store, ids) = store_with(&[("p", Tensor::row(vec![3.0, -1.5]))]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]).unwrap();
        let s1 = tape.sum(p).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let s2 = tape.sum(sq).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[7.0, -2.0]);
    }

    #[test]
    fn gradients_accumulate_across_tapes_until_zeroed() {
        let (mut store, ids) = store_with(&[("p", Tensor::scalar(2.0))]);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let p = tape.param(&store, ids[0]).unwrap();
            let loss = tape.sum(p).unwrap();
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad(ids[0]).item(), 2.0);
        store.zero_grads();
        assert_eq!(store.grad(ids[0]).item(), 0.0);
    }

    #[test]
    fn backward_consumes_the_tape() {
        let (mut store, ids) = store_with(&[("p", Tensor::scalar(1.0))]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(tape.is_consumed());
        assert!(matches!(
            tape.backward(loss, &mut store),
            Err(Error::Tape(_))
        ));
        assert!(matches!(tape.leaf(Tensor::scalar(0.0)), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let (mut store, ids) = store_with(&[("p", Tensor::row(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]).unwrap();
        assert!(matches!(
            tape.backward(p, &mut store),
            Err(Error::Tape(_))
        ));
    }

    #[test]
    fn matmul_gradients_match_closed_form() {
        // loss = sum(a x b): da = ones x b^T, db = a^T x ones.
        let a_val = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b_val = Tensor::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let (mut store, ids) = store_with(&[("a", a_val.clone()), ("b", b_val.clone())]);
        let mut tape = Tape::new();
        let a = tape.param(&store, ids[0]).unwrap();
        let b = tape.param(&store, ids[1]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss, &mut store).unwrap();

        let ones = Tensor::filled(2, 2, 1.0);
        let want_da = ones.matmul(&b_val.transposed()).unwrap();
        let want_db = a_val.transposed().matmul(&ones).unwrap();
        assert!(store.grad(ids[0]).bits_eq(&want_da));
        assert!(store.grad(ids[1]).bits_eq(&want_db));
    }

    #[test]
    fn slice_and_concat_route_adjoints() {
        let (mut store, ids) = store_with(&[
            ("a", Tensor::row(vec![1.0, 2.0])),
            ("b", Tensor::row(vec![3.0])),
        ]);
        let mut tape = Tape::new();
        let a = tape.param(&store, ids[0]).unwrap();
        let b = tape.param(&store, ids[1]).unwrap();
        let cat = tape.concat(&[a, b]).unwrap();
        // Keep only elements 1..3 = [a[1], b[0]], scaled by 5.
        let sl = tape.slice(cat, 1, 2).unwrap();
        let sc = tape.scale(sl, 5.0).unwrap();
        let loss = tape.sum(sc).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[0.0, 5.0]);
        assert_eq!(store.grad(ids[1]).data(), &[5.0]);
    }

    #[test]
    fn pick_row_routes_adjoint_to_one_row() {
        let (mut store, ids) =
            store_with(&[("e", Tensor::new(3, 2, vec![0.0; 6]).unwrap())]);
        let mut tape = Tape::new();
        let e = tape.param(&store, ids[0]).unwrap();
        let r = tape.pick_row(e, 2).unwrap();
        let loss = tape.sum(r).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
