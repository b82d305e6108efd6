//! Attention model family: a standard LSTM decoder attends over the encoder
//! features with additive scoring. The coverage refinement feeds the previous
//! step's weights back into the scores; the fertility refinement feeds back
//! the accumulated weights normalized by a predicted per-position capacity.

use crate::cells::{lstm_step, CellState, LstmParams};
use crate::ctx::MathCtx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::encoder::EncodeOut;
use super::{readout, AttParams, Parts};

/// Per-sentence attention precomputation.
pub struct AttSentence<R> {
    /// Encoder features stacked, J x 2*hidden.
    pub(super) h_mat: R,
    /// Features projected for scoring, J x hidden (one flat row per j).
    pub(super) h_proj: R,
    /// Fertility denominators 2 * sigmoid(h_j . u), 1 x J.
    pub(super) fert_denom: Option<R>,
    pub(super) j_len: usize,
}

/// Decoder state carried between steps.
#[derive(Clone)]
pub struct AttState<R> {
    pub(super) s: R,
    pub(super) c: R,
    /// Previous step's attention weights, 1 x J (zeros before the first step).
    pub(super) alpha_prev: R,
    /// Sum of all previous steps' weights, 1 x J.
    pub(super) alpha_sum: R,
}

pub(super) fn prepare<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    att: &AttParams,
    enc_h: &[C::Ref],
) -> AttSentence<C::Ref> {
    let j_len = enc_h.len();
    let flat = ctx.concat(enc_h);
    let (_, width) = ctx.shape_of(&enc_h[0]);
    let h_mat = ctx.reshape(&flat, j_len, width);
    let wh = ctx.param(att.wh);
    let h_proj = ctx.matmul(&h_mat, &wh);
    let fert_denom = att.fert_scale.map(|fs| {
        let u = ctx.param(fs);
        let col = ctx.matmul(&h_mat, &u);
        let row = ctx.reshape(&col, 1, j_len);
        let sig = ctx.sigmoid(&row);
        ctx.scale(&sig, 2.0)
    });
    AttSentence {
        h_mat,
        h_proj,
        fert_denom,
        j_len,
    }
}

/// One decoder step.
///
/// Scores e_j = v' tanh(s W + h_j U [+ feedback_j w]) come from the previous
/// state s; their softmax weights combine the encoder features into the
/// context, which joins the previous output's embedding as the LSTM input and
/// the new state in the readout.
pub(super) fn step<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    parts: &Parts,
    dec: &LstmParams,
    att: &AttParams,
    sent: &AttSentence<C::Ref>,
    st: &AttState<C::Ref>,
    y_prev: u32,
) -> (C::Ref, AttState<C::Ref>) {
    let hidden = dec.hidden;
    let ws = ctx.param(att.ws);
    let v = ctx.param(att.v);
    let s_proj = ctx.matmul(&st.s, &ws);

    // Coverage feeds back last step's weights; fertility feeds back the
    // accumulated weights scaled by each position's predicted capacity.
    let feedback_row = match (&sent.fert_denom, att.feedback) {
        (Some(denom), Some(_)) => Some(ctx.div(&st.alpha_sum, denom)),
        (None, Some(_)) => Some(st.alpha_prev.clone()),
        _ => None,
    };

    let mut scores = Vec::with_capacity(sent.j_len);
    for j in 0..sent.j_len {
        let hj = ctx.slice(&sent.h_proj, j * hidden, hidden);
        let mut pre = ctx.add(&s_proj, &hj);
        if let (Some(row), Some(fb)) = (&feedback_row, att.feedback) {
            let w = ctx.param(fb);
            let fj = ctx.slice(row, j, 1);
            let term = ctx.scalar_mul(&w, &fj);
            pre = ctx.add(&pre, &term);
        }
        let act = ctx.tanh(&pre);
        scores.push(ctx.matmul(&act, &v));
    }
    let e = ctx.concat(&scores);
    let alpha = ctx.softmax(&e);
    let context = ctx.matmul(&alpha, &sent.h_mat);

    let table = ctx.param(parts.tgt_embed);
    let ye = ctx.pick_row(&table, y_prev as usize);
    let joined = ctx.concat(&[ye, context.clone()]);
    let x = ctx.dropout(&joined);
    let prev = CellState {
        s: st.s.clone(),
        c: st.c.clone(),
    };
    let next = lstm_step(ctx, dec, &x, &prev);

    let ro_in = ctx.concat(&[next.s.clone(), context]);
    let logits = readout(ctx, parts.out_w, parts.out_b, &ro_in);

    let alpha_sum = ctx.add(&st.alpha_sum, &alpha);
    (
        logits,
        AttState {
            s: next.s,
            c: next.c,
            alpha_prev: alpha,
            alpha_sum,
        },
    )
}

pub(super) fn forward_logits<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    parts: &Parts,
    dec: &LstmParams,
    att: &AttParams,
    enc: &EncodeOut<C::Ref>,
    tgt_in: &[u32],
) -> Vec<C::Ref> {
    let sent = prepare(ctx, att, &enc.h);
    let mut state = AttState {
        s: enc.bwd_final.s.clone(),
        c: ctx.leaf(Tensor::zeros(1, dec.hidden)),
        alpha_prev: ctx.leaf(Tensor::zeros(1, sent.j_len)),
        alpha_sum: ctx.leaf(Tensor::zeros(1, sent.j_len)),
    };
    let mut logits = Vec::with_capacity(tgt_in.len());
    for &y in tgt_in {
        let (l, next) = step(ctx, parts, dec, att, &sent, &state, y);
        logits.push(l);
        state = next;
    }
    logits
}
