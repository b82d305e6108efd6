//! Beam search over incremental decode steps.
//!
//! Scores are length-normalized: total log probability divided by the number
//! of decode steps taken, the terminator included when one was emitted. The
//! step budget `max_len` caps total emissions; hypotheses still active at the
//! cap are terminated without the end token and scored over `max_len` steps.
//!
//! Expansion uses one [`Model::decode_step`] per surviving hypothesis per
//! step; branching clones the per-hypothesis state, which is a handful of
//! shared refs.

use std::cmp::Ordering;

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{DecodeState, Model};
use crate::scalar::Scalar;

/// A decoded candidate. `tokens` excludes the end-of-sentence terminator;
/// `finished` says the terminator was emitted (and its log probability is
/// included in `log_prob`) rather than the step budget running out.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Steps taken: one per token, plus one for the terminator if emitted.
    pub fn step_count(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Length-normalized score used for ranking.
    pub fn score(&self) -> f64 {
        self.log_prob / self.step_count().max(1) as f64
    }
}

/// Ranking: higher score first; ties prefer the shorter output, then the
/// lexicographically smaller token sequence.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Active<F: Scalar> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: DecodeState<F>,
}

struct Candidate {
    log_prob: f64,
    parent: usize,
    token: u32,
}

/// Beam search for one source sentence. Returns up to `beam_size` hypotheses,
/// best first. `max_len` defaults to `2 * src.len() + 10` steps.
pub fn beam_search<F: Scalar>(
    model: &Model<F>,
    src: &[u32],
    beam_size: usize,
    max_len: Option<usize>,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    if src.is_empty() {
        return Err(Error::Data("cannot decode an empty source sentence".into()));
    }
    let max_steps = max_len.unwrap_or(2 * src.len() + 10);
    if max_steps == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }

    let sctx = model.src_context(src)?;
    let mut active = vec![Active {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start_state(&sctx),
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    while !active.is_empty() {
        // No continuation of an active hypothesis can score above its current
        // log probability divided by the full step budget, so once the pool
        // best exceeds that bound the search is decided.
        if !pool.is_empty() {
            let best_active_lp = active
                .iter()
                .map(|a| a.log_prob)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_active_lp / (max_steps as f64) < pool[0].score() {
                break;
            }
        }

        // One decode step per hypothesis; children share the successor state.
        let mut steps = Vec::with_capacity(active.len());
        for hyp in &active {
            let y_prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (logits, next_state) = model.decode_step(&sctx, &hyp.state, y_prev)?;
            let log_probs = logits.log_softmax();
            if log_probs.data().iter().any(|&p| Scalar::to_f64(p).is_nan()) {
                return Err(Error::Numeric("NaN log probability during decoding".into()));
            }
            steps.push((log_probs, next_state));
        }

        let mut candidates = Vec::new();
        for (parent, (hyp, (log_probs, _))) in active.iter().zip(&steps).enumerate() {
            for (tok, &lp) in log_probs.data().iter().enumerate() {
                candidates.push(Candidate {
                    log_prob: hyp.log_prob + Scalar::to_f64(lp),
                    parent,
                    token: tok as u32,
                });
            }
        }
        candidates.sort_unstable_by(|a, b| {
            b.log_prob.total_cmp(&a.log_prob).then_with(|| {
                let sa = active[a.parent].tokens.iter().chain(std::iter::once(&a.token));
                let sb = active[b.parent].tokens.iter().chain(std::iter::once(&b.token));
                sa.cmp(sb)
            })
        });

        let mut next_active: Vec<Active<F>> = Vec::with_capacity(beam_size);
        for cand in candidates {
            if cand.token == EOS {
                pool.push(Hypothesis {
                    tokens: active[cand.parent].tokens.clone(),
                    log_prob: cand.log_prob,
                    finished: true,
                });
                continue;
            }
            if next_active.len() == beam_size {
                continue;
            }
            let mut tokens = active[cand.parent].tokens.clone();
            tokens.push(cand.token);
            if tokens.len() == max_steps {
                pool.push(Hypothesis {
                    tokens,
                    log_prob: cand.log_prob,
                    finished: false,
                });
            } else {
                next_active.push(Active {
                    tokens,
                    log_prob: cand.log_prob,
                    state: steps[cand.parent].1.clone(),
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(beam_size.max(1));
        active = next_active;
    }

    pool.sort_by(rank);
    pool.truncate(beam_size);
    debug_assert!(!pool.is_empty(), "step budget guarantees a pooled hypothesis");
    Ok(pool)
}

/// Decode every line of a corpus, preserving order. Empty input lines map to
/// empty output lines. Work is split over `workers` threads by sentence; the
/// output is identical for any worker count.
pub fn decode_corpus<F: Scalar>(
    model: &Model<F>,
    lines: &[String],
    encode: impl Fn(&str) -> Vec<u32> + Sync,
    decode: impl Fn(&[u32]) -> String + Sync,
    beam_size: usize,
    max_len: Option<usize>,
    workers: usize,
) -> Result<Vec<String>> {
    if workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    let one = |line: &String| -> Result<String> {
        let ids = encode(line);
        if ids.is_empty() {
            return Ok(String::new());
        }
        let best = beam_search(model, &ids, beam_size, max_len)?;
        Ok(decode(&best[0].tokens))
    };

    if workers == 1 || lines.len() <= 1 {
        return lines.iter().map(one).collect();
    }

    let chunk = lines.len().div_ceil(workers);
    let mut results: Vec<Result<String>> = Vec::with_capacity(lines.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = lines
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(one).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            results.extend(h.join().expect("decode worker panicked"));
        }
    });
    results.into_iter().collect()
}
