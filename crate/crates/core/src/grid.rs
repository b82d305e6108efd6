//! Execution schedules for the two-dimensional LSTM grid.
//!
//! A grid has source positions j = 1..J (horizontal) and target positions
//! i = 1..I (vertical). Cell (j, i) depends on (j-1, i) and (j, i-1); border
//! neighbors are zero states. Three schedules produce bitwise identical
//! states:
//!
//! - [`forward_full`]: row-major, one row i at a time (the canonical order)
//! - [`forward_wavefront`]: anti-diagonals j + i = const, cells within a
//!   diagonal computed concurrently; each cell runs the same kernels on the
//!   same operands as the canonical order, so values match bit for bit
//! - [`extend_row`]: one additional row given cached states of the previous
//!   row, for incremental decoding
//!
//! When a wavefront forward must also be recorded for backward, the values
//! are computed concurrently first, then the tape is written in canonical
//! row-major order and checked against the concurrent values, so gradients
//! never depend on the worker count.

use std::sync::Arc;

use crate::cells::{twodlstm_step, CellState, TwoDLstmParams};
use crate::ctx::{EvalCtx, MathCtx, TapeCtx};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// All cell states of a J x I grid, stored row-major by target position i.
pub struct GridStates<R> {
    j_len: usize,
    i_len: usize,
    cells: Vec<CellState<R>>,
}

impl<R> GridStates<R> {
    pub fn j_len(&self) -> usize {
        self.j_len
    }

    pub fn i_len(&self) -> usize {
        self.i_len
    }

    /// State at source position j and target position i, both 1-based.
    pub fn state(&self, j: usize, i: usize) -> &CellState<R> {
        assert!(
            (1..=self.j_len).contains(&j) && (1..=self.i_len).contains(&i),
            "grid position ({j}, {i}) out of bounds"
        );
        &self.cells[(i - 1) * self.j_len + (j - 1)]
    }

    /// State at the last source position for target position i: the cell
    /// whose hidden vector summarizes the full source for that output step.
    pub fn final_state(&self, i: usize) -> &CellState<R> {
        self.state(self.j_len, i)
    }
}

/// Flat input index for grid position (j, i), both 1-based. Inputs use the
/// same row-major layout as the stored states.
pub fn input_index(j: usize, i: usize, j_len: usize) -> usize {
    (i - 1) * j_len + (j - 1)
}

/// Canonical sequential schedule: i outer, j inner.
pub fn forward_full<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    params: &TwoDLstmParams,
    inputs: &[C::Ref],
    j_len: usize,
    i_len: usize,
) -> GridStates<C::Ref> {
    assert_eq!(inputs.len(), j_len * i_len, "grid inputs length");
    let zero = CellState::zeros(ctx, params.hidden);
    let mut cells: Vec<CellState<C::Ref>> = Vec::with_capacity(j_len * i_len);
    for i in 1..=i_len {
        for j in 1..=j_len {
            let horiz = if j > 1 {
                cells[(i - 1) * j_len + (j - 2)].clone()
            } else {
                zero.clone()
            };
            let vert = if i > 1 {
                cells[(i - 2) * j_len + (j - 1)].clone()
            } else {
                zero.clone()
            };
            let x = &inputs[input_index(j, i, j_len)];
            cells.push(twodlstm_step(ctx, params, x, &horiz, &vert));
        }
    }
    GridStates {
        j_len,
        i_len,
        cells,
    }
}

type ArcState<F> = CellState<Arc<Tensor<F>>>;

/// Wavefront schedule over anti-diagonals with up to `workers` threads.
///
/// Cells on one diagonal have no mutual dependencies; each is computed by the
/// same cell kernel reading already finished neighbor states, so the result
/// is independent of thread count and interleaving.
pub fn forward_wavefront<F: Scalar>(
    store: &crate::tape::ParamStore<F>,
    params: &TwoDLstmParams,
    inputs: &[Tensor<F>],
    j_len: usize,
    i_len: usize,
    workers: usize,
) -> GridStates<Arc<Tensor<F>>> {
    assert_eq!(inputs.len(), j_len * i_len, "grid inputs length");
    let workers = workers.max(1);
    let mut cells: Vec<Option<ArcState<F>>> = Vec::with_capacity(j_len * i_len);
    cells.resize_with(j_len * i_len, || None);
    let zero: ArcState<F> = {
        let mut ctx = EvalCtx::new(store);
        CellState::zeros(&mut ctx, params.hidden)
    };

    for d in 2..=(j_len + i_len) {
        let j_lo = d.saturating_sub(i_len).max(1);
        let j_hi = (d - 1).min(j_len);
        if j_lo > j_hi {
            continue;
        }
        let coords: Vec<usize> = (j_lo..=j_hi).collect();

        let compute_one = |j: usize, done: &[Option<ArcState<F>>]| -> ArcState<F> {
            let i = d - j;
            let mut ctx = EvalCtx::new(store);
            let horiz = if j > 1 {
                done[(i - 1) * j_len + (j - 2)].clone().expect("horiz ready")
            } else {
                zero.clone()
            };
            let vert = if i > 1 {
                done[(i - 2) * j_len + (j - 1)].clone().expect("vert ready")
            } else {
                zero.clone()
            };
            let x = ctx.leaf(inputs[input_index(j, i, j_len)].clone());
            twodlstm_step(&mut ctx, params, &x, &horiz, &vert)
        };

        let results: Vec<(usize, ArcState<F>)> = if workers == 1 || coords.len() == 1 {
            coords
                .iter()
                .map(|&j| (j, compute_one(j, &cells)))
                .collect()
        } else {
            let chunk = coords.len().div_ceil(workers);
            let done = &cells;
            std::thread::scope(|scope| {
                let handles: Vec<_> = coords
                    .chunks(chunk)
                    .map(|part| {
                        scope.spawn(move || {
                            part.iter()
                                .map(|&j| (j, compute_one(j, done)))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("wavefront worker panicked"))
                    .collect()
            })
        };

        for (j, state) in results {
            let i = d - j;
            cells[(i - 1) * j_len + (j - 1)] = Some(state);
        }
    }

    GridStates {
        j_len,
        i_len,
        cells: cells.into_iter().map(|c| c.expect("cell computed")).collect(),
    }
}

/// Wavefront forward that also records the grid on a tape.
///
/// Values are produced concurrently first, then the tape is written in the
/// canonical row-major order and every recorded state is checked bitwise
/// against the concurrent result. The recorded tape is therefore identical to
/// the one [`forward_full`] would have written, making backward results
/// independent of `workers`.
pub fn forward_wavefront_recorded<F: Scalar>(
    ctx: &mut TapeCtx<'_, F>,
    params: &TwoDLstmParams,
    inputs: &[NodeId],
    j_len: usize,
    i_len: usize,
    workers: usize,
) -> Result<GridStates<NodeId>> {
    let input_values: Vec<Tensor<F>> = inputs.iter().map(|n| ctx.value(n)).collect();
    let concurrent = forward_wavefront(ctx.store(), params, &input_values, j_len, i_len, workers);
    let grid = forward_full(ctx, params, inputs, j_len, i_len);
    for i in 1..=i_len {
        for j in 1..=j_len {
            let want = concurrent.state(j, i);
            let got = grid.state(j, i);
            if !ctx.value(&got.s).bits_eq(&want.s) || !ctx.value(&got.c).bits_eq(&want.c) {
                return Err(Error::Numeric(format!(
                    "wavefront state ({j}, {i}) diverged from canonical order"
                )));
            }
        }
    }
    Ok(grid)
}

/// States of one completed grid row, the only context needed to compute the
/// next row. Cloning is cheap (shared tensors), so decoding can branch a
/// cache per beam hypothesis.
#[derive(Clone)]
pub struct RowCache<F: Scalar> {
    j_len: usize,
    hidden: usize,
    rows_done: usize,
    row: Vec<ArcState<F>>,
}

impl<F: Scalar> RowCache<F> {
    pub fn empty(j_len: usize, hidden: usize) -> Self {
        RowCache {
            j_len,
            hidden,
            rows_done: 0,
            row: Vec::new(),
        }
    }

    /// Number of grid rows already computed.
    pub fn rows_done(&self) -> usize {
        self.rows_done
    }

    /// State at the last source position of the cached row, if any row has
    /// been computed.
    pub fn final_state(&self) -> Option<&ArcState<F>> {
        self.row.last()
    }

    /// All states of the cached row, indexed by source position.
    pub fn row(&self) -> &[ArcState<F>] {
        &self.row
    }
}

/// Compute row `cache.rows_done() + 1` of the grid from its inputs.
///
/// `inputs` holds x_(j, i+1) for j = 1..J. The scan over j is the same
/// kernel sequence the full forward uses for that row, so composing
/// `extend_row` from an empty cache reproduces [`forward_full`] bit for bit.
pub fn extend_row<F: Scalar>(
    store: &crate::tape::ParamStore<F>,
    params: &TwoDLstmParams,
    cache: &RowCache<F>,
    inputs: &[Tensor<F>],
) -> Result<RowCache<F>> {
    if inputs.len() != cache.j_len {
        return Err(Error::ShapeMismatch(format!(
            "row extension needs {} inputs, got {}",
            cache.j_len,
            inputs.len()
        )));
    }
    let mut ctx = EvalCtx::new(store);
    let zero: ArcState<F> = CellState::zeros(&mut ctx, params.hidden);
    let mut row: Vec<ArcState<F>> = Vec::with_capacity(cache.j_len);
    for (j0, input) in inputs.iter().enumerate() {
        let horiz = if j0 > 0 { row[j0 - 1].clone() } else { zero.clone() };
        let vert = if cache.rows_done > 0 {
            cache.row[j0].clone()
        } else {
            zero.clone()
        };
        let x = ctx.leaf(input.clone());
        row.push(twodlstm_step(&mut ctx, params, &x, &horiz, &vert));
    }
    Ok(RowCache {
        j_len: cache.j_len,
        hidden: cache.hidden,
        rows_done: cache.rows_done + 1,
        row,
    })
}
