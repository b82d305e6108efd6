//! Translation models: a shared bidirectional encoder feeding either a
//! two-dimensional LSTM grid or an attention decoder.
//!
//! All model math is generic over [`MathCtx`], so the teacher-forced loss
//! (recorded on a tape) and the incremental decode steps (pure values) run
//! the same kernel sequence and produce bitwise identical distributions.

mod attention;
mod encoder;
mod twod;

use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{LstmParams, TwoDLstmParams};
use crate::ctx::{EvalCtx, MathCtx, TapeCtx};
use crate::error::{Error, Result};
use crate::grid::RowCache;
use crate::scalar::Scalar;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;

pub use attention::AttState;
pub use encoder::EncodeOut;

/// Model families and their feedback refinements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Attention decoder over encoder states.
    Attention,
    /// Attention with the previous step's weights fed back into scoring.
    Coverage,
    /// Attention with accumulated weights normalized by predicted fertility.
    Fertility,
    /// Two-dimensional grid; the output context is the last source column.
    TwoDSeq2Seq,
    /// Two-dimensional grid with a learned soft combination over the column.
    TwoDWeighting,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Attention,
        Variant::Coverage,
        Variant::Fertility,
        Variant::TwoDSeq2Seq,
        Variant::TwoDWeighting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Attention => "attention",
            Variant::Coverage => "coverage",
            Variant::Fertility => "fertility",
            Variant::TwoDSeq2Seq => "2d-seq2seq",
            Variant::TwoDWeighting => "2d-weighting",
        }
    }

    pub fn is_grid(self) -> bool {
        matches!(self, Variant::TwoDSeq2Seq | Variant::TwoDWeighting)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "attention" => Ok(Variant::Attention),
            "coverage" => Ok(Variant::Coverage),
            "fertility" => Ok(Variant::Fertility),
            "2d-seq2seq" => Ok(Variant::TwoDSeq2Seq),
            "2d-weighting" => Ok(Variant::TwoDWeighting),
            other => Err(Error::Config(format!(
                "unknown model variant {other:?}; expected one of attention, \
                 coverage, fertility, 2d-seq2seq, 2d-weighting"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::Config("hidden and embed sizes must be positive".into()));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(Error::Config(
                "vocabularies must include the four reserved tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Learned soft combination over one grid column.
#[derive(Clone, Copy)]
pub(crate) struct WeightingParams {
    pub w: ParamId,
    pub v: ParamId,
}

/// Additive attention parameters. `feedback` is the direction written by the
/// coverage or fertility signal; `fert_scale` predicts per-position fertility.
#[derive(Clone, Copy)]
pub(crate) struct AttParams {
    pub ws: ParamId,
    pub wh: ParamId,
    pub v: ParamId,
    pub feedback: Option<ParamId>,
    pub fert_scale: Option<ParamId>,
}

pub(crate) enum FamilyParts {
    Grid {
        cell: TwoDLstmParams,
        weighting: Option<WeightingParams>,
    },
    Att {
        dec: LstmParams,
        att: AttParams,
    },
}

pub(crate) struct Parts {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub enc_fwd: LstmParams,
    pub enc_bwd: LstmParams,
    pub family: FamilyParts,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub struct Model<F: Scalar> {
    variant: Variant,
    dims: ModelDims,
    pub store: ParamStore<F>,
    parts: Parts,
}

fn embed_matrix<F: Scalar>(
    rng: &mut ChaCha8Rng,
    vocab: usize,
    embed: usize,
    hidden: usize,
) -> Tensor<F> {
    let bound = 1.0 / (hidden as f64).sqrt();
    let data = (0..vocab * embed)
        .map(|_| F::from_f64(rand::Rng::gen_range(rng, -bound..bound)))
        .collect();
    Tensor::new(vocab, embed, data).expect("embed shape")
}

impl<F: Scalar> Model<F> {
    /// Build a freshly initialized model. Parameters are registered in a
    /// fixed order and drawn from a stream seeded by `seed`, so two models
    /// with the same arguments are identical.
    pub fn new(variant: Variant, dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = dims.hidden;
        let e = dims.embed;

        let src_embed = store.register(
            "src_embed",
            embed_matrix(&mut rng, dims.src_vocab, e, n),
        )?;
        let tgt_embed = store.register(
            "tgt_embed",
            embed_matrix(&mut rng, dims.tgt_vocab, e, n),
        )?;
        let enc_fwd = LstmParams::init(&mut store, "enc_fwd", e, n, &mut rng)?;
        let enc_bwd = LstmParams::init(&mut store, "enc_bwd", e, n, &mut rng)?;

        let (family, readout_dim) = match variant {
            Variant::TwoDSeq2Seq | Variant::TwoDWeighting => {
                let cell = TwoDLstmParams::init(&mut store, "grid", 2 * n + e, n, &mut rng)?;
                let weighting = if variant == Variant::TwoDWeighting {
                    let bound = 1.0 / (n as f64).sqrt();
                    let mut draw = |rows: usize, cols: usize| -> Tensor<F> {
                        let data = (0..rows * cols)
                            .map(|_| F::from_f64(rand::Rng::gen_range(&mut rng, -bound..bound)))
                            .collect();
                        Tensor::new(rows, cols, data).expect("weighting shape")
                    };
                    let w = draw(n, n);
                    let v = draw(n, 1);
                    Some(WeightingParams {
                        w: store.register("weighting.w", w)?,
                        v: store.register("weighting.v", v)?,
                    })
                } else {
                    None
                };
                (FamilyParts::Grid { cell, weighting }, n)
            }
            Variant::Attention | Variant::Coverage | Variant::Fertility => {
                let dec = LstmParams::init(&mut store, "dec", e + 2 * n, n, &mut rng)?;
                let bound = 1.0 / (n as f64).sqrt();
                let mut draw = |rows: usize, cols: usize| -> Tensor<F> {
                    let data = (0..rows * cols)
                        .map(|_| F::from_f64(rand::Rng::gen_range(&mut rng, -bound..bound)))
                        .collect();
                    Tensor::new(rows, cols, data).expect("attention shape")
                };
                let ws = draw(n, n);
                let wh = draw(2 * n, n);
                let v = draw(n, 1);
                let ws = store.register("att.ws", ws)?;
                let wh = store.register("att.wh", wh)?;
                let v = store.register("att.v", v)?;
                let feedback = match variant {
                    Variant::Coverage => {
                        let fb = draw(1, n);
                        Some(store.register("att.coverage", fb)?)
                    }
                    Variant::Fertility => {
                        let fb = draw(1, n);
                        Some(store.register("att.fert_feedback", fb)?)
                    }
                    _ => None,
                };
                let fert_scale = if variant == Variant::Fertility {
                    let fs = draw(2 * n, 1);
                    Some(store.register("att.fert_scale", fs)?)
                } else {
                    None
                };
                (
                    FamilyParts::Att {
                        dec,
                        att: AttParams {
                            ws,
                            wh,
                            v,
                            feedback,
                            fert_scale,
                        },
                    },
                    3 * n,
                )
            }
        };

        let bound = 1.0 / (n as f64).sqrt();
        let out_w_val = {
            let data = (0..readout_dim * dims.tgt_vocab)
                .map(|_| F::from_f64(rand::Rng::gen_range(&mut rng, -bound..bound)))
                .collect();
            Tensor::new(readout_dim, dims.tgt_vocab, data).expect("readout shape")
        };
        let out_w = store.register("out.w", out_w_val)?;
        let out_b = store.register("out.b", Tensor::zeros(1, dims.tgt_vocab))?;

        Ok(Model {
            variant,
            dims,
            store,
            parts: Parts {
                src_embed,
                tgt_embed,
                enc_fwd,
                enc_bwd,
                family,
                out_w,
                out_b,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    fn validate_ids(&self, src: &[u32], tgt: &[u32]) -> Result<()> {
        if src.is_empty() {
            return Err(Error::Data("source sequence is empty".into()));
        }
        if let Some(&t) = src.iter().find(|&&t| t as usize >= self.dims.src_vocab) {
            return Err(Error::Data(format!("source token id {t} out of range")));
        }
        if let Some(&t) = tgt.iter().find(|&&t| t as usize >= self.dims.tgt_vocab) {
            return Err(Error::Data(format!("target token id {t} out of range")));
        }
        Ok(())
    }

    /// Teacher-forced output logits for every target step, through any
    /// context. `tgt` excludes the terminating end-of-sequence token; the
    /// returned vector has `tgt.len() + 1` entries whose labels are
    /// `tgt + [EOS]`.
    fn forward_logits<C: MathCtx<F>>(&self, ctx: &mut C, src: &[u32], tgt: &[u32]) -> Vec<C::Ref> {
        let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
        tgt_in.push(crate::data::BOS);
        tgt_in.extend_from_slice(tgt);

        let enc = encoder::encode(ctx, self.parts.src_embed, &self.parts.enc_fwd, &self.parts.enc_bwd, src);
        match &self.parts.family {
            FamilyParts::Grid { cell, weighting } => twod::forward_logits(
                ctx,
                &self.parts,
                cell,
                weighting.as_ref(),
                &enc,
                &tgt_in,
            ),
            FamilyParts::Att { dec, att } => attention::forward_logits(
                ctx,
                &self.parts,
                dec,
                att,
                &enc,
                &tgt_in,
            ),
        }
    }

    /// Teacher-forced negative log-likelihood of `tgt ++ [EOS]` given `src`,
    /// as a context ref, plus the number of scored tokens.
    pub fn sentence_loss<C: MathCtx<F>>(
        &self,
        ctx: &mut C,
        src: &[u32],
        tgt: &[u32],
    ) -> Result<(C::Ref, usize)> {
        self.validate_ids(src, tgt)?;
        let logits = self.forward_logits(ctx, src, tgt);
        let mut labels: Vec<u32> = tgt.to_vec();
        labels.push(crate::data::EOS);

        let mut acc: Option<C::Ref> = None;
        for (l, &y) in logits.iter().zip(&labels) {
            let lp = ctx.log_softmax(l);
            let picked = ctx.slice(&lp, y as usize, 1);
            let neg = ctx.scale(&picked, -1.0);
            acc = Some(match acc {
                None => neg,
                Some(a) => ctx.add(&a, &neg),
            });
        }
        Ok((acc.expect("at least one step"), labels.len()))
    }

    /// Record the sentence loss on `tape`, optionally with dropout and, for
    /// grid variants, wavefront-scheduled forward values. The recorded tape
    /// is always in canonical order regardless of `workers`.
    pub fn recorded_sentence_loss(
        &self,
        tape: &mut Tape<F>,
        src: &[u32],
        tgt: &[u32],
        dropout: Option<(f64, u64)>,
        workers: usize,
    ) -> Result<(NodeId, usize)> {
        self.validate_ids(src, tgt)?;
        let mut ctx = match dropout {
            Some((rate, seed)) => TapeCtx::with_dropout(tape, &self.store, rate, seed),
            None => TapeCtx::new(tape, &self.store),
        };
        if workers > 1 {
            if let FamilyParts::Grid { cell, weighting } = &self.parts.family {
                let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
                tgt_in.push(crate::data::BOS);
                tgt_in.extend_from_slice(tgt);
                let enc = encoder::encode(
                    &mut ctx,
                    self.parts.src_embed,
                    &self.parts.enc_fwd,
                    &self.parts.enc_bwd,
                    src,
                );
                let logits = twod::forward_logits_wavefront(
                    &mut ctx,
                    &self.parts,
                    cell,
                    weighting.as_ref(),
                    &enc,
                    &tgt_in,
                    workers,
                )?;
                return finish_loss(&mut ctx, logits, tgt);
            }
        }
        let logits = self.forward_logits(&mut ctx, src, tgt);
        finish_loss(&mut ctx, logits, tgt)
    }

    /// Record the sentence loss reading parameter values from an external
    /// store with this model's layout. Finite-difference checking perturbs a
    /// store it owns while the model describes the wiring, so the two must be
    /// separable here.
    pub fn recorded_loss_on(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        src: &[u32],
        tgt: &[u32],
    ) -> Result<(NodeId, usize)> {
        self.validate_ids(src, tgt)?;
        let mut ctx = TapeCtx::new(tape, store);
        let logits = self.forward_logits(&mut ctx, src, tgt);
        finish_loss(&mut ctx, logits, tgt)
    }

    /// Pure teacher-forced negative log-likelihood and token count.
    pub fn sentence_nll(&self, src: &[u32], tgt: &[u32]) -> Result<(f64, usize)> {
        let mut ctx = EvalCtx::new(&self.store);
        let (loss, tokens) = self.sentence_loss(&mut ctx, src, tgt)?;
        Ok((ctx.value(&loss).item().to_f64(), tokens))
    }

    /// Pure teacher-forced logits for every step, for equivalence testing
    /// against the incremental decode path.
    pub fn teacher_logits(&self, src: &[u32], tgt: &[u32]) -> Result<Vec<Tensor<F>>> {
        self.validate_ids(src, tgt)?;
        let mut ctx = EvalCtx::new(&self.store);
        let logits = self.forward_logits(&mut ctx, src, tgt);
        Ok(logits.iter().map(|l| ctx.value(l)).collect())
    }

    /// Per-sentence encoder work shared by all decode steps.
    pub fn src_context(&self, src: &[u32]) -> Result<SrcContext<F>> {
        self.validate_ids(src, &[])?;
        let mut ctx = EvalCtx::new(&self.store);
        let enc = encoder::encode(
            &mut ctx,
            self.parts.src_embed,
            &self.parts.enc_fwd,
            &self.parts.enc_bwd,
            src,
        );
        match &self.parts.family {
            FamilyParts::Grid { .. } => Ok(SrcContext::Grid {
                h: enc.h.iter().map(|r| ctx.value(r)).collect(),
            }),
            FamilyParts::Att { att, .. } => {
                let sent = attention::prepare(&mut ctx, att, &enc.h);
                Ok(SrcContext::Att {
                    sent,
                    s0: enc.bwd_final.s,
                })
            }
        }
    }

    pub fn start_state(&self, sctx: &SrcContext<F>) -> DecodeState<F> {
        match sctx {
            SrcContext::Grid { h } => DecodeState::Grid {
                cache: RowCache::empty(h.len(), self.dims.hidden),
            },
            SrcContext::Att { sent, s0 } => DecodeState::Att(AttState {
                s: s0.clone(),
                c: Arc::new(Tensor::zeros(1, self.dims.hidden)),
                alpha_prev: Arc::new(Tensor::zeros(1, sent.j_len)),
                alpha_sum: Arc::new(Tensor::zeros(1, sent.j_len)),
            }),
        }
    }

    /// One incremental decode step: logits over the target vocabulary for the
    /// next position, given the previous output token.
    pub fn decode_step(
        &self,
        sctx: &SrcContext<F>,
        state: &DecodeState<F>,
        y_prev: u32,
    ) -> Result<(Tensor<F>, DecodeState<F>)> {
        if y_prev as usize >= self.dims.tgt_vocab {
            return Err(Error::Data(format!("target token id {y_prev} out of range")));
        }
        match (sctx, state) {
            (SrcContext::Grid { h }, DecodeState::Grid { cache }) => {
                let FamilyParts::Grid { cell, weighting } = &self.parts.family else {
                    unreachable!("grid context on a non-grid model")
                };
                let (logits, cache) = twod::decode_step(
                    &self.store,
                    &self.parts,
                    cell,
                    weighting.as_ref(),
                    h,
                    cache,
                    y_prev,
                )?;
                Ok((logits, DecodeState::Grid { cache }))
            }
            (SrcContext::Att { sent, .. }, DecodeState::Att(st)) => {
                let FamilyParts::Att { dec, att } = &self.parts.family else {
                    unreachable!("attention context on a non-attention model")
                };
                let mut ctx = EvalCtx::new(&self.store);
                let (logits, next) = attention::step(
                    &mut ctx,
                    &self.parts,
                    dec,
                    att,
                    sent,
                    st,
                    y_prev,
                );
                Ok((ctx.value(&logits), DecodeState::Att(next)))
            }
            _ => Err(Error::Data("decode state does not match source context".into())),
        }
    }
}

fn finish_loss<F: Scalar>(
    ctx: &mut TapeCtx<'_, F>,
    logits: Vec<NodeId>,
    tgt: &[u32],
) -> Result<(NodeId, usize)> {
    let mut labels: Vec<u32> = tgt.to_vec();
    labels.push(crate::data::EOS);
    let mut acc: Option<NodeId> = None;
    for (l, &y) in logits.iter().zip(&labels) {
        let lp = ctx.log_softmax(l);
        let picked = ctx.slice(&lp, y as usize, 1);
        let neg = ctx.scale(&picked, -1.0);
        acc = Some(match acc {
            None => neg,
            Some(a) => ctx.add(&a, &neg),
        });
    }
    Ok((acc.expect("at least one step"), labels.len()))
}

/// Precomputed per-sentence source representation for decoding.
pub enum SrcContext<F: Scalar> {
    Grid {
        /// Encoder outputs h_j, each 1 x 2*hidden.
        h: Vec<Tensor<F>>,
    },
    Att {
        sent: attention::AttSentence<Arc<Tensor<F>>>,
        s0: Arc<Tensor<F>>,
    },
}

impl<F: Scalar> SrcContext<F> {
    pub fn src_len(&self) -> usize {
        match self {
            SrcContext::Grid { h } => h.len(),
            SrcContext::Att { sent, .. } => sent.j_len,
        }
    }
}

/// Per-hypothesis decoder state. Cloning is cheap; beam search branches one
/// state per surviving candidate.
#[derive(Clone)]
pub enum DecodeState<F: Scalar> {
    Grid { cache: RowCache<F> },
    Att(AttState<Arc<Tensor<F>>>),
}

/// Readout shared by every variant: logits = context * W + b.
pub(crate) fn readout<F: Scalar, C: MathCtx<F>>(
    ctx: &mut C,
    out_w: ParamId,
    out_b: ParamId,
    t: &C::Ref,
) -> C::Ref {
    let w = ctx.param(out_w);
    let b = ctx.param(out_b);
    let proj = ctx.matmul(t, &w);
    ctx.add(&proj, &b)
}
