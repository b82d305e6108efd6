//! Grid model family: a two-dimensional LSTM consumes the source features
//! once per target position; the output context for position i is the state
//! at the last source column (optionally a learned soft combination over the
//! whole column).

use crate::cells::{CellState, TwoDLstmParams};
use crate::ctx::{EvalCtx, MathCtx, TapeCtx};
use crate::error::Result;
use crate::grid::{extend_row, forward_full, forward_wavefront_recorded, GridStates, RowCache};
use crate::scalar::Scalar;
use crate::tape::{NodeId, ParamStore};
use crate::tensor::Tensor;

use super::encoder::EncodeOut;
use super::{readout, Parts, WeightingParams};

/// Grid input for position (j, i): source feature h_j next to the embedding
/// of the previous output token, built row by row in the canonical order.
fn build_inputs<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    parts: &Parts,
    enc_h: &[C::Ref],
    tgt_in: &[u32],
) -> Vec<C::Ref> {
    let table = ctx.param(parts.tgt_embed);
    let mut inputs = Vec::with_capacity(enc_h.len() * tgt_in.len());
    for &y in tgt_in {
        let ye = ctx.pick_row(&table, y as usize);
        for h in enc_h {
            let x = ctx.concat(&[h.clone(), ye.clone()]);
            inputs.push(ctx.dropout(&x));
        }
    }
    inputs
}

fn logits_from_grid<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    parts: &Parts,
    weighting: Option<&WeightingParams>,
    grid: &GridStates<C::Ref>,
) -> Vec<C::Ref> {
    (1..=grid.i_len())
        .map(|i| {
            let t = match weighting {
                None => grid.final_state(i).s.clone(),
                Some(wt) => {
                    let row: Vec<CellState<C::Ref>> = (1..=grid.j_len())
                        .map(|j| grid.state(j, i).clone())
                        .collect();
                    weighted_context(ctx, wt, &row)
                }
            };
            readout(ctx, parts.out_w, parts.out_b, &t)
        })
        .collect()
}

/// Soft combination over one grid column: scores v' tanh(W s) per source
/// position, normalized and applied to the states.
fn weighted_context<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    wt: &WeightingParams,
    row: &[CellState<C::Ref>],
) -> C::Ref {
    let w = ctx.param(wt.w);
    let v = ctx.param(wt.v);
    let mut scores = Vec::with_capacity(row.len());
    let mut states = Vec::with_capacity(row.len());
    for cell in row {
        let proj = ctx.matmul(&cell.s, &w);
        let act = ctx.tanh(&proj);
        scores.push(ctx.matmul(&act, &v));
        states.push(cell.s.clone());
    }
    let e = ctx.concat(&scores);
    let gamma = ctx.softmax(&e);
    let flat = ctx.concat(&states);
    let (_, n) = ctx.shape_of(&row[0].s);
    let mat = ctx.reshape(&flat, row.len(), n);
    ctx.matmul(&gamma, &mat)
}

pub(super) fn forward_logits<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    parts: &Parts,
    cell: &TwoDLstmParams,
    weighting: Option<&WeightingParams>,
    enc: &EncodeOut<C::Ref>,
    tgt_in: &[u32],
) -> Vec<C::Ref> {
    let inputs = build_inputs(ctx, parts, &enc.h, tgt_in);
    let grid = forward_full(ctx, cell, &inputs, enc.h.len(), tgt_in.len());
    logits_from_grid(ctx, parts, weighting, &grid)
}

/// Recording forward whose grid values are computed by the wavefront
/// scheduler before the tape is written canonically.
pub(super) fn forward_logits_wavefront<F: Scalar>(
    ctx: &mut TapeCtx<'_, F>,
    parts: &Parts,
    cell: &TwoDLstmParams,
    weighting: Option<&WeightingParams>,
    enc: &EncodeOut<NodeId>,
    tgt_in: &[u32],
    workers: usize,
) -> Result<Vec<NodeId>> {
    let inputs = build_inputs(ctx, parts, &enc.h, tgt_in);
    let grid = forward_wavefront_recorded(ctx, cell, &inputs, enc.h.len(), tgt_in.len(), workers)?;
    Ok(logits_from_grid(ctx, parts, weighting, &grid))
}

/// One incremental decode step: extend the grid by one row and read out.
/// Runs the same kernels in the same order as the row-major forward, so the
/// logits match the teacher-forced path bit for bit.
pub(super) fn decode_step<F: Scalar>(
    store: &ParamStore<F>,
    parts: &Parts,
    cell: &TwoDLstmParams,
    weighting: Option<&WeightingParams>,
    enc_h: &[Tensor<F>],
    cache: &RowCache<F>,
    y_prev: u32,
) -> Result<(Tensor<F>, RowCache<F>)> {
    let ye = store.value(parts.tgt_embed).pick_row(y_prev as usize)?;
    let inputs: Vec<Tensor<F>> = enc_h
        .iter()
        .map(|h| Tensor::concat(&[h, &ye]))
        .collect();
    let cache = extend_row(store, cell, cache, &inputs)?;

    let mut ctx = EvalCtx::new(store);
    let t = match weighting {
        None => cache.final_state().expect("freshly extended row").s.clone(),
        Some(wt) => weighted_context(&mut ctx, wt, cache.row()),
    };
    let logits = readout(&mut ctx, parts.out_w, parts.out_b, &t);
    Ok((ctx.value(&logits), cache))
}
