//! Recurrent cells: the standard LSTM used by the encoder and decoder, and
//! the two-dimensional LSTM used by the grid models.
//!
//! Gate projections are fused: a cell stores one input matrix whose columns
//! hold all gates side by side in a fixed order. Computing the fused product
//! and slicing is bitwise identical to per-gate products because every output
//! element of a matrix product is an independent dot product.

use rand::Rng;

use crate::ctx::MathCtx;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gate column order inside fused projections. The two-dimensional cell
/// appends its lambda gate after the candidate block.
pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CANDIDATE: usize = 3;
pub const GATE_LAMBDA: usize = 4;

/// Hidden and cell activations of one cell, generic over the context ref.
#[derive(Clone)]
pub struct CellState<R> {
    pub s: R,
    pub c: R,
}

impl<R> CellState<R> {
    pub fn zeros<F: Scalar, C: MathCtx<F, Ref = R>>(ctx: &mut C, hidden: usize) -> Self {
        CellState {
            s: ctx.leaf(Tensor::zeros(1, hidden)),
            c: ctx.leaf(Tensor::zeros(1, hidden)),
        }
    }
}

/// Uniform draws in [-1/sqrt(hidden), 1/sqrt(hidden)], sampled as f64 and
/// converted, so f32 and f64 models consume the same random stream.
fn init_matrix<F: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, hidden: usize) -> Tensor<F> {
    let bound = 1.0 / (hidden as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(rows, cols, data).expect("init shape")
}

/// Bias vector for `gates` fused gates of width `hidden`, zero everywhere
/// except the forget gate block, which starts at one to keep early gradients
/// flowing through the cell memory.
fn init_bias<F: Scalar>(gates: usize, hidden: usize) -> Tensor<F> {
    let mut b = Tensor::zeros(1, gates * hidden);
    for k in 0..hidden {
        b.set(0, GATE_FORGET * hidden + k, F::one());
    }
    b
}

/// Standard LSTM parameters, fused over the four gates
/// (input, forget, output, candidate).
#[derive(Clone, Copy)]
pub struct LstmParams {
    /// Input projection, `input_dim x 4*hidden`.
    pub w: ParamId,
    /// Recurrent projection, `hidden x 4*hidden`.
    pub u: ParamId,
    /// Bias, `1 x 4*hidden`.
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.register(
            &format!("{prefix}.w"),
            init_matrix(rng, input_dim, 4 * hidden, hidden),
        )?;
        let u = store.register(
            &format!("{prefix}.u"),
            init_matrix(rng, hidden, 4 * hidden, hidden),
        )?;
        let b = store.register(&format!("{prefix}.b"), init_bias(4, hidden))?;
        Ok(LstmParams {
            w,
            u,
            b,
            input_dim,
            hidden,
        })
    }
}

/// One step of the standard LSTM.
///
/// Gate preactivations are `x W + s U + b` accumulated in that order; the
/// cell update is `c = f * c_prev + i * cand`, `s = tanh(c) * o`.
pub fn lstm_step<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    p: &LstmParams,
    x: &C::Ref,
    prev: &CellState<C::Ref>,
) -> CellState<C::Ref> {
    let n = p.hidden;
    let w = ctx.param(p.w);
    let u = ctx.param(p.u);
    let b = ctx.param(p.b);

    let xw = ctx.matmul(x, &w);
    let su = ctx.matmul(&prev.s, &u);
    let lin = ctx.add(&xw, &su);
    let pre = ctx.add(&lin, &b);

    let i_pre = ctx.slice(&pre, GATE_INPUT * n, n);
    let f_pre = ctx.slice(&pre, GATE_FORGET * n, n);
    let o_pre = ctx.slice(&pre, GATE_OUTPUT * n, n);
    let g_pre = ctx.slice(&pre, GATE_CANDIDATE * n, n);

    let i = ctx.sigmoid(&i_pre);
    let f = ctx.sigmoid(&f_pre);
    let o = ctx.sigmoid(&o_pre);
    let g = ctx.tanh(&g_pre);

    let keep = ctx.mul(&f, &prev.c);
    let write = ctx.mul(&g, &i);
    let c = ctx.add(&keep, &write);
    let tc = ctx.tanh(&c);
    let s = ctx.mul(&tc, &o);
    CellState { s, c }
}

/// Two-dimensional LSTM parameters, fused over the five gates
/// (input, forget, output, candidate, lambda).
#[derive(Clone, Copy)]
pub struct TwoDLstmParams {
    /// Input projection, `input_dim x 5*hidden`.
    pub w: ParamId,
    /// Horizontal recurrent projection (previous source position), `hidden x 5*hidden`.
    pub u: ParamId,
    /// Vertical recurrent projection (previous target position), `hidden x 5*hidden`.
    pub v: ParamId,
    /// Bias, `1 x 5*hidden`.
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl TwoDLstmParams {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.register(
            &format!("{prefix}.w"),
            init_matrix(rng, input_dim, 5 * hidden, hidden),
        )?;
        let u = store.register(
            &format!("{prefix}.u"),
            init_matrix(rng, hidden, 5 * hidden, hidden),
        )?;
        let v = store.register(
            &format!("{prefix}.v"),
            init_matrix(rng, hidden, 5 * hidden, hidden),
        )?;
        let b = store.register(&format!("{prefix}.b"), init_bias(5, hidden))?;
        Ok(TwoDLstmParams {
            w,
            u,
            v,
            b,
            input_dim,
            hidden,
        })
    }
}

/// One step of the two-dimensional LSTM at grid position (j, i).
///
/// `horiz` is the state from (j-1, i) and feeds the U projection; `vert` is
/// the state from (j, i-1) and feeds the V projection. The lambda gate blends
/// the two incoming cell memories before the usual forget/input update:
///
/// ```text
/// pre   = x W + s_horiz U + s_vert V + b
/// blend = lambda * c_horiz + (1 - lambda) * c_vert
/// c     = f * blend + cand * i
/// s     = tanh(c) * o
/// ```
pub fn twodlstm_step<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    p: &TwoDLstmParams,
    x: &C::Ref,
    horiz: &CellState<C::Ref>,
    vert: &CellState<C::Ref>,
) -> CellState<C::Ref> {
    let n = p.hidden;
    let w = ctx.param(p.w);
    let u = ctx.param(p.u);
    let v = ctx.param(p.v);
    let b = ctx.param(p.b);

    let xw = ctx.matmul(x, &w);
    let hu = ctx.matmul(&horiz.s, &u);
    let vv = ctx.matmul(&vert.s, &v);
    let a = ctx.add(&xw, &hu);
    let lin = ctx.add(&a, &vv);
    let pre = ctx.add(&lin, &b);

    let i_pre = ctx.slice(&pre, GATE_INPUT * n, n);
    let f_pre = ctx.slice(&pre, GATE_FORGET * n, n);
    let o_pre = ctx.slice(&pre, GATE_OUTPUT * n, n);
    let g_pre = ctx.slice(&pre, GATE_CANDIDATE * n, n);
    let l_pre = ctx.slice(&pre, GATE_LAMBDA * n, n);

    let i = ctx.sigmoid(&i_pre);
    let f = ctx.sigmoid(&f_pre);
    let o = ctx.sigmoid(&o_pre);
    let g = ctx.tanh(&g_pre);
    let lambda = ctx.sigmoid(&l_pre);

    let from_horiz = ctx.mul(&lambda, &horiz.c);
    let lam_rest = ctx.one_minus(&lambda);
    let from_vert = ctx.mul(&lam_rest, &vert.c);
    let blend = ctx.add(&from_horiz, &from_vert);

    let keep = ctx.mul(&f, &blend);
    let write = ctx.mul(&g, &i);
    let c = ctx.add(&keep, &write);
    let tc = ctx.tanh(&c);
    let s = ctx.mul(&tc, &o);
    CellState { s, c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctx::EvalCtx;
    use crate::tensor::sigmoid_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar (hidden=1) oracle computed with per-gate arithmetic.
    fn twod_scalar_oracle(
        x: &[f64],
        w: &Tensor<f64>,
        u: &Tensor<f64>,
        v: &Tensor<f64>,
        b: &Tensor<f64>,
        sh: f64,
        ch: f64,
        sv: f64,
        cv: f64,
    ) -> (f64, f64) {
        let mut pre = [0.0f64; 5];
        for g in 0..5 {
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate() {
                acc += xk * w.get(k, g);
            }
            acc += sh * u.get(0, g);
            acc += sv * v.get(0, g);
            acc += b.get(0, g);
            pre[g] = acc;
        }
        let i = sigmoid_scalar(pre[GATE_INPUT]);
        let f = sigmoid_scalar(pre[GATE_FORGET]);
        let o = sigmoid_scalar(pre[GATE_OUTPUT]);
        let g = pre[GATE_CANDIDATE].tanh();
        let lam = sigmoid_scalar(pre[GATE_LAMBDA]);
        let c = f * (lam * ch + (1.0 - lam) * cv) + g * i;
        let s = c.tanh() * o;
        (s, c)
    }

    fn state_from<F: Scalar>(
        ctx: &mut EvalCtx<F>,
        s: Vec<F>,
        c: Vec<F>,
    ) -> CellState<std::sync::Arc<Tensor<F>>> {
        CellState {
            s: ctx.leaf(Tensor::row(s)),
            c: ctx.leaf(Tensor::row(c)),
        }
    }

    #[test]
    fn twod_step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let p = TwoDLstmParams::init(&mut store, "cell", 3, 1, &mut rng).unwrap();
        // Overwrite the bias with nonzero values to exercise every term.
        *store.value_mut(p.b) = Tensor::row(vec![0.1, -0.2, 0.3, 0.05, -0.15]);

        let w = store.value(p.w).clone();
        let u = store.value(p.u).clone();
        let v = store.value(p.v).clone();
        let b = store.value(p.b).clone();

        let x = vec![0.4, -0.9, 0.2];
        let (sh, ch, sv, cv) = (0.3, -0.5, -0.1, 0.8);

        let mut ctx = EvalCtx::new(&store);
        let xr = ctx.leaf(Tensor::row(x.clone()));
        let horiz = state_from(&mut ctx, vec![sh], vec![ch]);
        let vert = state_from(&mut ctx, vec![sv], vec![cv]);
        let out = twodlstm_step(&mut ctx, &p, &xr, &horiz, &vert);

        let (want_s, want_c) = twod_scalar_oracle(&x, &w, &u, &v, &b, sh, ch, sv, cv);
        assert!((ctx.value(&out.s).item() - want_s).abs() < 1e-15);
        assert!((ctx.value(&out.c).item() - want_c).abs() < 1e-15);
    }

    #[test]
    fn lambda_one_ignores_vertical_memory() {
        // With lambda saturated at 1 the blended memory equals the horizontal
        // memory, so changing c_vert must not change the output.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let p = TwoDLstmParams::init(&mut store, "cell", 2, 4, &mut rng).unwrap();
        for k in 0..4 {
            store
                .value_mut(p.b)
                .set(0, GATE_LAMBDA * 4 + k, 1e4);
        }

        let run = |cv: Vec<f64>, store: &ParamStore<f64>| {
            let mut ctx = EvalCtx::new(store);
            let x = ctx.leaf(Tensor::row(vec![0.5, -0.5]));
            let horiz = state_from(&mut ctx, vec![0.1; 4], vec![0.2; 4]);
            let vert = state_from(&mut ctx, vec![0.0; 4], cv);
            let out = twodlstm_step(&mut ctx, &p, &x, &horiz, &vert);
            ctx.value(&out.s)
        };
        let a = run(vec![5.0; 4], &store);
        let b = run(vec![-5.0; 4], &store);
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn u_and_v_are_not_interchangeable() {
        // U projects the horizontal neighbor and V the vertical one; the
        // lambda gate then weights specifically the horizontal memory. An
        // implementation that mixed the two up would survive swapping the
        // matrices; the real cell must not.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let p = TwoDLstmParams::init(&mut store, "cell", 2, 3, &mut rng).unwrap();

        let mut swapped = ParamStore::<f64>::new();
        let q = TwoDLstmParams {
            w: swapped.register("cell.w", store.value(p.w).clone()).unwrap(),
            u: swapped.register("cell.u", store.value(p.v).clone()).unwrap(),
            v: swapped.register("cell.v", store.value(p.u).clone()).unwrap(),
            b: swapped.register("cell.b", store.value(p.b).clone()).unwrap(),
            input_dim: 2,
            hidden: 3,
        };

        let run = |store: &ParamStore<f64>, p: &TwoDLstmParams| {
            let mut ctx = EvalCtx::new(store);
            let xr = ctx.leaf(Tensor::row(vec![0.7, 0.1]));
            let horiz = state_from(&mut ctx, vec![0.3, -0.2, 0.5], vec![0.9, 0.0, -0.4]);
            let vert = state_from(&mut ctx, vec![-0.6, 0.25, 0.05], vec![0.15, -0.8, 0.3]);
            let out = twodlstm_step(&mut ctx, p, &xr, &horiz, &vert);
            ctx.value(&out.s)
        };

        let base = run(&store, &p);
        let other = run(&swapped, &q);
        let max_diff = base
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "swapped projections changed nothing");
    }

    #[test]
    fn lstm_step_matches_unfused_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::<f64>::new();
        let p = LstmParams::init(&mut store, "enc", 2, 1, &mut rng).unwrap();
        *store.value_mut(p.b) = Tensor::row(vec![0.02, 0.9, -0.3, 0.4]);

        let w = store.value(p.w).clone();
        let u = store.value(p.u).clone();
        let b = store.value(p.b).clone();
        let x = [0.25, -1.0];
        let (s0, c0) = (0.6, -0.2);

        let mut pre = [0.0f64; 4];
        for g in 0..4 {
            pre[g] = x[0] * w.get(0, g) + x[1] * w.get(1, g) + s0 * u.get(0, g) + b.get(0, g);
        }
        let i = sigmoid_scalar(pre[GATE_INPUT]);
        let f = sigmoid_scalar(pre[GATE_FORGET]);
        let o = sigmoid_scalar(pre[GATE_OUTPUT]);
        let g = pre[GATE_CANDIDATE].tanh();
        let want_c = f * c0 + g * i;
        let want_s = want_c.tanh() * o;

        let mut ctx = EvalCtx::new(&store);
        let xr = ctx.leaf(Tensor::row(x.to_vec()));
        let prev = state_from(&mut ctx, vec![s0], vec![c0]);
        let out = lstm_step(&mut ctx, &p, &xr, &prev);
        assert!((ctx.value(&out.c).item() - want_c).abs() < 1e-15);
        assert!((ctx.value(&out.s).item() - want_s).abs() < 1e-15);
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let p = TwoDLstmParams::init(&mut store, "cell", 2, 3, &mut rng).unwrap();
        let b = store.value(p.b);
        for g in 0..5 {
            for k in 0..3 {
                let want = if g == GATE_FORGET { 1.0 } else { 0.0 };
                assert_eq!(b.get(0, g * 3 + k), want);
            }
        }
        // Weight draws stay inside the scaled uniform bound.
        let bound = 1.0 / 3.0f64.sqrt();
        for &v in store.value(p.w).data() {
            assert!(v > -bound && v < bound);
        }
    }
}
