//! Evaluation contexts: one set of model math, two execution modes.
//!
//! Model code is written once against [`MathCtx`] and runs either on a
//! [`TapeCtx`] (operations recorded for backward) or an [`EvalCtx`] (pure
//! values, no tape, cheap shareable refs). Both modes execute the same tensor
//! kernels in the same order, so their forward values agree bit for bit.
//!
//! Shape mismatches inside model wiring are construction bugs, not runtime
//! conditions, so context methods panic on them; fallible validation happens
//! at the public API boundaries.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;

pub trait MathCtx<F: Scalar> {
    type Ref: Clone;

    fn leaf(&mut self, t: Tensor<F>) -> Self::Ref;
    fn param(&mut self, id: ParamId) -> Self::Ref;
    /// Owned copy of a ref's current value.
    fn value(&self, r: &Self::Ref) -> Tensor<F>;
    fn shape_of(&self, r: &Self::Ref) -> (usize, usize);

    fn matmul(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref;
    fn add(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref;
    fn sub(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref;
    fn mul(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref;
    fn div(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref;
    fn one_minus(&mut self, x: &Self::Ref) -> Self::Ref;
    /// Elementwise product with a 1x1 ref.
    fn scalar_mul(&mut self, x: &Self::Ref, s: &Self::Ref) -> Self::Ref;
    fn scale(&mut self, x: &Self::Ref, c: f64) -> Self::Ref;
    fn tanh(&mut self, x: &Self::Ref) -> Self::Ref;
    fn sigmoid(&mut self, x: &Self::Ref) -> Self::Ref;
    fn softmax(&mut self, x: &Self::Ref) -> Self::Ref;
    fn log_softmax(&mut self, x: &Self::Ref) -> Self::Ref;
    fn sum(&mut self, x: &Self::Ref) -> Self::Ref;
    fn slice(&mut self, x: &Self::Ref, offset: usize, len: usize) -> Self::Ref;
    fn concat(&mut self, parts: &[Self::Ref]) -> Self::Ref;
    fn reshape(&mut self, x: &Self::Ref, rows: usize, cols: usize) -> Self::Ref;
    fn pick_row(&mut self, x: &Self::Ref, row: usize) -> Self::Ref;

    /// Inverted dropout on non-recurrent inputs. Identity except on a
    /// recording context configured with a positive rate.
    fn dropout(&mut self, x: &Self::Ref) -> Self::Ref {
        x.clone()
    }
}

/// Per-sentence dropout mask stream.
///
/// Masks scale kept elements by 1/keep so evaluation needs no rescaling.
/// Elements are drawn in ascending index order from a dedicated stream, so a
/// sentence's masks depend only on the stream seed.
pub struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

impl DropoutState {
    pub fn new(rate: f64, stream_seed: u64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        DropoutState {
            rate,
            rng: ChaCha8Rng::seed_from_u64(stream_seed),
        }
    }

    fn mask<F: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<F> {
        let keep = 1.0 - self.rate;
        let inv = F::from_f64(1.0 / keep);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let u: f64 = self.rng.gen::<f64>();
            data.push(if u < keep { inv } else { F::zero() });
        }
        Tensor::new(rows, cols, data).expect("mask shape")
    }
}

/// Recording context: every operation lands on the tape.
pub struct TapeCtx<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    store: &'a ParamStore<F>,
    dropout: Option<DropoutState>,
}

impl<'a, F: Scalar> TapeCtx<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, store: &'a ParamStore<F>) -> Self {
        TapeCtx {
            tape,
            store,
            dropout: None,
        }
    }

    pub fn with_dropout(
        tape: &'a mut Tape<F>,
        store: &'a ParamStore<F>,
        rate: f64,
        stream_seed: u64,
    ) -> Self {
        let dropout = (rate > 0.0).then(|| DropoutState::new(rate, stream_seed));
        TapeCtx {
            tape,
            store,
            dropout,
        }
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }
}

impl<F: Scalar> MathCtx<F> for TapeCtx<'_, F> {
    type Ref = NodeId;

    fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        self.tape.leaf(t).expect("leaf")
    }

    fn param(&mut self, id: ParamId) -> NodeId {
        self.tape.param(self.store, id).expect("param")
    }

    fn value(&self, r: &NodeId) -> Tensor<F> {
        self.tape.value(*r).clone()
    }

    fn shape_of(&self, r: &NodeId) -> (usize, usize) {
        self.tape.value(*r).shape()
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.matmul(*a, *b).expect("matmul")
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.add(*a, *b).expect("add")
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.sub(*a, *b).expect("sub")
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.mul(*a, *b).expect("mul")
    }

    fn div(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.div(*a, *b).expect("div")
    }

    fn one_minus(&mut self, x: &NodeId) -> NodeId {
        self.tape.one_minus(*x).expect("one_minus")
    }

    fn scalar_mul(&mut self, x: &NodeId, s: &NodeId) -> NodeId {
        self.tape.scalar_mul(*x, *s).expect("scalar_mul")
    }

    fn scale(&mut self, x: &NodeId, c: f64) -> NodeId {
        self.tape.scale(*x, c).expect("scale")
    }

    fn tanh(&mut self, x: &NodeId) -> NodeId {
        self.tape.tanh(*x).expect("tanh")
    }

    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        self.tape.sigmoid(*x).expect("sigmoid")
    }

    fn softmax(&mut self, x: &NodeId) -> NodeId {
        self.tape.softmax(*x).expect("softmax")
    }

    fn log_softmax(&mut self, x: &NodeId) -> NodeId {
        self.tape.log_softmax(*x).expect("log_softmax")
    }

    fn sum(&mut self, x: &NodeId) -> NodeId {
        self.tape.sum(*x).expect("sum")
    }

    fn slice(&mut self, x: &NodeId, offset: usize, len: usize) -> NodeId {
        self.tape.slice(*x, offset, len).expect("slice")
    }

    fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.tape.concat(parts).expect("concat")
    }

    fn reshape(&mut self, x: &NodeId, rows: usize, cols: usize) -> NodeId {
        self.tape.reshape(*x, rows, cols).expect("reshape")
    }

    fn pick_row(&mut self, x: &NodeId, row: usize) -> NodeId {
        self.tape.pick_row(*x, row).expect("pick_row")
    }

    fn dropout(&mut self, x: &NodeId) -> NodeId {
        let Some(state) = self.dropout.as_mut() else {
            return *x;
        };
        let (rows, cols) = self.tape.value(*x).shape();
        let mask = state.mask(rows, cols);
        let m = self.tape.leaf(mask).expect("dropout mask");
        self.tape.mul(*x, m).expect("dropout mul")
    }
}

/// Pure value context: no recording, refs are shared tensors.
///
/// Parameter refs are memoized so repeated `param` calls (one per decode
/// step, say) share one copy instead of cloning the table each time.
pub struct EvalCtx<'a, F: Scalar> {
    store: &'a ParamStore<F>,
    params: HashMap<ParamId, Arc<Tensor<F>>>,
}

impl<'a, F: Scalar> EvalCtx<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        EvalCtx {
            store,
            params: HashMap::new(),
        }
    }
}

impl<F: Scalar> MathCtx<F> for EvalCtx<'_, F> {
    type Ref = Arc<Tensor<F>>;

    fn leaf(&mut self, t: Tensor<F>) -> Self::Ref {
        Arc::new(t)
    }

    fn param(&mut self, id: ParamId) -> Self::Ref {
        self.params
            .entry(id)
            .or_insert_with(|| Arc::new(self.store.value(id).clone()))
            .clone()
    }

    fn value(&self, r: &Self::Ref) -> Tensor<F> {
        (**r).clone()
    }

    fn shape_of(&self, r: &Self::Ref) -> (usize, usize) {
        r.shape()
    }

    fn matmul(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref {
        Arc::new(a.matmul(b).expect("matmul"))
    }

    fn add(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref {
        Arc::new(a.add(b).expect("add"))
    }

    fn sub(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref {
        Arc::new(a.sub(b).expect("sub"))
    }

    fn mul(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref {
        Arc::new(a.mul(b).expect("mul"))
    }

    fn div(&mut self, a: &Self::Ref, b: &Self::Ref) -> Self::Ref {
        Arc::new(a.div(b).expect("div"))
    }

    fn one_minus(&mut self, x: &Self::Ref) -> Self::Ref {
        Arc::new(x.one_minus())
    }

    fn scalar_mul(&mut self, x: &Self::Ref, s: &Self::Ref) -> Self::Ref {
        assert_eq!(s.len(), 1, "scalar_mul multiplier must be 1x1");
        Arc::new(x.scale(s.item()))
    }

    fn scale(&mut self, x: &Self::Ref, c: f64) -> Self::Ref {
        Arc::new(x.scale(F::from_f64(c)))
    }

    fn tanh(&mut self, x: &Self::Ref) -> Self::Ref {
        Arc::new(x.tanh())
    }

    fn sigmoid(&mut self, x: &Self::Ref) -> Self::Ref {
        Arc::new(x.sigmoid())
    }

    fn softmax(&mut self, x: &Self::Ref) -> Self::Ref {
        Arc::new(x.softmax())
    }

    fn log_softmax(&mut self, x: &Self::Ref) -> Self::Ref {
        Arc::new(x.log_softmax())
    }

    fn sum(&mut self, x: &Self::Ref) -> Self::Ref {
        Arc::new(x.sum())
    }

    fn slice(&mut self, x: &Self::Ref, offset: usize, len: usize) -> Self::Ref {
        Arc::new(x.slice_flat(offset, len).expect("slice"))
    }

    fn concat(&mut self, parts: &[Self::Ref]) -> Self::Ref {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|p| p.as_ref()).collect();
        Arc::new(Tensor::concat(&refs))
    }

    fn reshape(&mut self, x: &Self::Ref, rows: usize, cols: usize) -> Self::Ref {
        Arc::new(x.reshape(rows, cols).expect("reshape"))
    }

    fn pick_row(&mut self, x: &Self::Ref, row: usize) -> Self::Ref {
        Arc::new(x.pick_row(row).expect("pick_row"))
    }
}
