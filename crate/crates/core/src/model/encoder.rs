//! Bidirectional LSTM over the source sentence.

use crate::cells::{lstm_step, CellState, LstmParams};
use crate::ctx::MathCtx;
use crate::scalar::Scalar;
use crate::tape::ParamId;

pub struct EncodeOut<R> {
    /// Per-position features h_j: forward and backward hidden states
    /// concatenated, each 1 x 2*hidden.
    pub h: Vec<R>,
    /// Backward state after consuming position 1; initializes the attention
    /// decoder.
    pub bwd_final: CellState<R>,
}

pub fn encode<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    src_embed: ParamId,
    fwd: &LstmParams,
    bwd: &LstmParams,
    src: &[u32],
) -> EncodeOut<C::Ref> {
    assert!(!src.is_empty(), "encoder needs a non-empty source");
    let table = ctx.param(src_embed);
    let xs: Vec<C::Ref> = src
        .iter()
        .map(|&t| {
            let e = ctx.pick_row(&table, t as usize);
            ctx.dropout(&e)
        })
        .collect();

    let mut forward = Vec::with_capacity(xs.len());
    let mut st = CellState::zeros(ctx, fwd.hidden);
    for x in &xs {
        st = lstm_step(ctx, fwd, x, &st);
        forward.push(st.clone());
    }

    let mut backward: Vec<Option<CellState<C::Ref>>> = vec![None; xs.len()];
    let mut st = CellState::zeros(ctx, bwd.hidden);
    for (idx, x) in xs.iter().enumerate().rev() {
        st = lstm_step(ctx, bwd, x, &st);
        backward[idx] = Some(st.clone());
    }

    let h = forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| {
            let b = b.as_ref().expect("backward state");
            ctx.concat(&[f.s.clone(), b.s.clone()])
        })
        .collect();

    EncodeOut { h, bwd_final: st }
}
