//! Adam optimization, gradient clipping, the training loop, and checkpoint
//! retention and averaging.
//!
//! Training is deterministic end to end for a fixed configuration: parameter
//! init, shuffling, dropout masks, batch assembly and update order all derive
//! from the config seed, and every reduction runs in a fixed order. Reruns
//! produce bit-identical parameters and metric values; only the wall-clock
//! field of the metrics log differs.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{corpus_perplexity, encode_corpus, ParallelCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint, CheckpointMeta, RunConfig};
use crate::model::{Model, ModelDims};
use crate::scalar::Scalar;
use crate::tape::{ParamStore, Tape};

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in registration
/// order. Updates walk parameters and elements in ascending order.
pub struct AdamState<F: Scalar> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let m = store.ids().map(|id| vec![F::zero(); store.value(id).len()]).collect();
        let v = store.ids().map(|id| vec![F::zero(); store.value(id).len()]).collect();
        AdamState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently in `store`. Non-finite
    /// gradients abort before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<F>, hp: &AdamParams) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if store.grad(id).has_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    store.name(id)
                )));
            }
        }
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = F::from_f64(1.0 - hp.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - hp.beta2.powi(t));
        let b1 = F::from_f64(hp.beta1);
        let b2 = F::from_f64(hp.beta2);
        let one_m_b1 = F::from_f64(1.0 - hp.beta1);
        let one_m_b2 = F::from_f64(1.0 - hp.beta2);
        let lr = F::from_f64(hp.lr);
        let eps = F::from_f64(hp.eps);

        for (k, &id) in ids.iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let value = store.value_mut(id).data_mut();
            for (e, &g) in grad.iter().enumerate() {
                m[e] = b1 * m[e] + one_m_b1 * g;
                v[e] = b2 * v[e] + one_m_b2 * g * g;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                value[e] = value[e] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale every gradient by `c` (token-mean normalization of accumulated
/// per-sentence gradients).
pub fn scale_grads<F: Scalar>(store: &mut ParamStore<F>, c: f64) {
    let ids: Vec<_> = store.ids().collect();
    let c = F::from_f64(c);
    for id in ids {
        for g in store.grad_mut(id).data_mut() {
            *g = *g * c;
        }
    }
}

/// Rescale gradients so the global L2 norm is at most `max_norm`; returns the
/// pre-clip norm. The norm accumulates in f64 over parameters and elements in
/// ascending order. A non-finite norm is an error.
pub fn clip_global_norm<F: Scalar>(store: &mut ParamStore<F>, max_norm: f64) -> Result<f64> {
    let ids: Vec<_> = store.ids().collect();
    let mut sq = 0.0f64;
    for &id in &ids {
        for &g in store.grad(id).data() {
            let g = Scalar::to_f64(g);
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for &id in &ids {
            for g in store.grad_mut(id).data_mut() {
                *g = *g * scale;
            }
        }
    }
    Ok(norm)
}

/// Element-wise mean of checkpoints: for each element, the values are summed
/// in the given path order and divided by the count. All inputs must agree on
/// variant, dimensions and dtype, and the stored dtype must be `F`.
pub fn average_checkpoints<F: Scalar>(paths: &[PathBuf]) -> Result<(Model<F>, CheckpointMeta)> {
    if paths.is_empty() {
        return Err(Error::Data("no checkpoints to average".into()));
    }
    let (mut model, first) = load_checkpoint::<F>(&paths[0])?;
    if first.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "averaging must run at the stored precision ({})",
            first.dtype.name()
        )));
    }
    let mut meta = first.clone();
    for path in &paths[1..] {
        let (other, m) = load_checkpoint::<F>(path)?;
        if m.variant != first.variant || m.dims != first.dims || m.dtype != first.dtype {
            return Err(Error::Checkpoint(format!(
                "{} does not match the first checkpoint's model",
                path.display()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            model.store.value_mut(id).add_assign(other.store.value(id))?;
        }
        meta.step = meta.step.max(m.step);
        if m.config_hash != meta.config_hash {
            meta.config_hash = "-".into();
        }
    }
    let k = F::from_f64(paths.len() as f64);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v = *v / k;
        }
    }
    meta.dev_ppl = f64::NAN;
    Ok((model, meta))
}

/// One line of the metrics log; `dev_ppl` appears on evaluation steps.
#[derive(Serialize)]
struct MetricsLine {
    step: u64,
    train_nll: f64,
    dev_ppl: Option<f64>,
    wall_time: f64,
}

pub struct TrainReport {
    pub steps: u64,
    /// Retained checkpoints as (dev perplexity, step, path), best first.
    pub best: Vec<(f64, u64, PathBuf)>,
    pub averaged: PathBuf,
    pub metrics: PathBuf,
}

/// SplitMix-style mixer deriving per-sentence dropout stream seeds from the
/// run seed and a global sentence counter.
fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const KEEP_CHECKPOINTS: usize = 4;

/// Train a model from the configuration's corpora. Writes into `out_dir`:
/// source and target vocabularies, a JSONL metrics log, the best retained
/// checkpoints by dev perplexity, and their element-wise average as
/// `avg.ckpt`. `workers` parallelizes the grid forward pass within a
/// sentence; results are identical for any worker count.
pub fn train<F: Scalar>(
    cfg: &RunConfig,
    config_hash: &str,
    out_dir: &Path,
    workers: usize,
) -> Result<TrainReport> {
    if workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    let need = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
        p.clone()
            .ok_or_else(|| Error::Config(format!("config is missing {what}")))
    };
    let train_corpus = ParallelCorpus::load(
        &need(&cfg.train_src, "train_src")?,
        &need(&cfg.train_tgt, "train_tgt")?,
    )?
    .filtered_by_len(cfg.max_len);
    let dev_corpus = ParallelCorpus::load(
        &need(&cfg.dev_src, "dev_src")?,
        &need(&cfg.dev_tgt, "dev_tgt")?,
    )?
    .filtered_by_len(cfg.max_len);
    if train_corpus.is_empty() {
        return Err(Error::Data("no training pairs remain after filtering".into()));
    }
    if dev_corpus.is_empty() {
        return Err(Error::Data("no dev pairs remain after filtering".into()));
    }

    std::fs::create_dir_all(out_dir)?;
    let src_vocab = Vocabulary::build(train_corpus.src.iter().map(|s| s.as_str()), cfg.vocab_size)?;
    let tgt_vocab = Vocabulary::build(train_corpus.tgt.iter().map(|s| s.as_str()), cfg.vocab_size)?;
    src_vocab.save(&out_dir.join("vocab.src"))?;
    tgt_vocab.save(&out_dir.join("vocab.tgt"))?;

    let train_pairs = encode_corpus(&train_corpus, &src_vocab, &tgt_vocab);
    let dev_pairs = encode_corpus(&dev_corpus, &src_vocab, &tgt_vocab);

    let dims = ModelDims {
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        embed: cfg.embed,
        hidden: cfg.hidden,
    };
    let mut model = Model::<F>::new(cfg.model, dims, cfg.seed)?;
    let mut adam = AdamState::new(&model.store);
    let hp = AdamParams::with_lr(cfg.lr);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::fs::File::create(&metrics_path)?;
    let started = Instant::now();

    let src_len = |idx: usize| train_pairs[idx].0.len();
    let n = train_pairs.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let half_point = batches_per_epoch.div_ceil(2);

    let mut kept: Vec<(f64, u64, PathBuf)> = Vec::new();
    let mut step = 0u64;
    let mut sentence_counter = 0u64;

    for _epoch in 0..cfg.epochs {
        // Shuffle, then sort inside windows of several batches by source
        // length so batches are length-homogeneous but epoch order varies.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        for window in order.chunks_mut(cfg.batch_size * 8) {
            window.sort_by_key(|&idx| src_len(idx));
        }

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.store.zero_grads();
            let mut batch_nll = 0.0f64;
            let mut tokens = 0usize;
            for &idx in batch {
                let (src, tgt) = &train_pairs[idx];
                let dropout =
                    (cfg.dropout > 0.0).then(|| (cfg.dropout, mix64(cfg.seed, sentence_counter)));
                sentence_counter += 1;
                let mut tape = Tape::new();
                let (loss, count) =
                    model.recorded_sentence_loss(&mut tape, src, tgt, dropout, workers)?;
                batch_nll += Scalar::to_f64(tape.value(loss).item());
                tokens += count;
                tape.backward(loss, &mut model.store)?;
            }
            scale_grads(&mut model.store, 1.0 / tokens as f64);
            clip_global_norm(&mut model.store, cfg.clip)?;
            adam.step(&mut model.store, &hp)?;
            step += 1;

            let train_nll = batch_nll / tokens as f64;
            let mut dev_ppl = None;
            let at_half = batch_idx + 1 == half_point;
            let at_end = batch_idx + 1 == batches_per_epoch;
            if at_half || at_end {
                let ppl = corpus_perplexity(&model, &dev_pairs)?;
                dev_ppl = Some(ppl);
                let path = out_dir.join(format!("ckpt_{step:08}.ckpt"));
                save_checkpoint(&path, &model, step, ppl, config_hash)?;
                kept.push((ppl, step, path));
                kept.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                while kept.len() > KEEP_CHECKPOINTS {
                    let (_, _, path) = kept.pop().expect("nonempty");
                    std::fs::remove_file(path)?;
                }
            }
            let line = MetricsLine {
                step,
                train_nll,
                dev_ppl,
                wall_time: started.elapsed().as_secs_f64(),
            };
            writeln!(metrics, "{}", serde_json::to_string(&line).expect("metrics line"))?;
        }
    }

    // Average the retained checkpoints in chronological order.
    let mut chrono = kept.clone();
    chrono.sort_by_key(|(_, s, _)| *s);
    let paths: Vec<PathBuf> = chrono.iter().map(|(_, _, p)| p.clone()).collect();
    let (avg_model, avg_meta) = average_checkpoints::<F>(&paths)?;
    let averaged = out_dir.join("avg.ckpt");
    save_checkpoint(
        &averaged,
        &avg_model,
        avg_meta.step,
        avg_meta.dev_ppl,
        &avg_meta.config_hash,
    )?;

    Ok(TrainReport {
        steps: step,
        best: kept,
        averaged,
        metrics: metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::tensor::Tensor;

    fn store_with(values: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for (name, v) in values {
            store.register(name, Tensor::row(v.clone())).unwrap();
        }
        store
    }

    fn set_grad(store: &mut ParamStore<f64>, name: &str, g: Vec<f64>) {
        let id = store.id_by_name(name).unwrap();
        *store.grad_mut(id) = Tensor::row(g);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // After one step from zero moments, m_hat = g and v_hat = g^2, so the
        // update is lr * g / (|g| + eps).
        let mut store = store_with(&[("p", vec![1.0, -2.0, 0.5])]);
        set_grad(&mut store, "p", vec![0.3, -0.1, 2.0]);
        let mut adam = AdamState::new(&store);
        let hp = AdamParams::with_lr(0.01);
        adam.step(&mut store, &hp).unwrap();

        let id = store.id_by_name("p").unwrap();
        let got = store.value(id).data();
        let x0s: [f64; 3] = [1.0, -2.0, 0.5];
        let gs: [f64; 3] = [0.3, -0.1, 2.0];
        for ((&x0, &g), &x1) in x0s.iter().zip(&gs).zip(got) {
            let want = x0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((x1 - want).abs() < 1e-12, "{x1} vs {want}");
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_changes_nothing() {
        let mut store = store_with(&[("p", vec![1.5, -0.25])]);
        let before = store.value(store.id_by_name("p").unwrap()).clone();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &AdamParams::with_lr(0.1)).unwrap();
        assert!(store.value(store.id_by_name("p").unwrap()).bits_eq(&before));
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut store = store_with(&[("p", vec![1.0])]);
        set_grad(&mut store, "p", vec![f64::NAN]);
        let before = store.value(store.id_by_name("p").unwrap()).clone();
        let mut adam = AdamState::new(&store);
        let err = adam.step(&mut store, &AdamParams::with_lr(0.1));
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert!(store.value(store.id_by_name("p").unwrap()).bits_eq(&before));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn clip_rescales_to_the_threshold() {
        let mut store = store_with(&[("a", vec![3.0]), ("b", vec![4.0])]);
        set_grad(&mut store, "a", vec![3.0]);
        set_grad(&mut store, "b", vec![4.0]);
        let norm = clip_global_norm(&mut store, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        let ga = store.grad(store.id_by_name("a").unwrap()).data()[0];
        let gb = store.grad(store.id_by_name("b").unwrap()).data()[0];
        assert!((ga - 0.6).abs() < 1e-15);
        assert!((gb - 0.8).abs() < 1e-15);
        let post = (ga * ga + gb * gb).sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_is_identity_below_the_threshold() {
        let mut store = store_with(&[("a", vec![0.3, -0.4])]);
        set_grad(&mut store, "a", vec![0.3, -0.4]);
        let norm = clip_global_norm(&mut store, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-15);
        let g = store.grad(store.id_by_name("a").unwrap());
        assert!(g.bits_eq(&Tensor::row(vec![0.3, -0.4])));
    }

    #[test]
    fn clip_rejects_non_finite_norms() {
        let mut store = store_with(&[("a", vec![1.0])]);
        set_grad(&mut store, "a", vec![f64::INFINITY]);
        assert!(matches!(
            clip_global_norm(&mut store, 1.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn grad_scaling_by_one_is_bitwise_identity() {
        let mut store = store_with(&[("a", vec![0.1, 0.7])]);
        set_grad(&mut store, "a", vec![0.123456, -9.87]);
        let before = store.grad(store.id_by_name("a").unwrap()).clone();
        scale_grads(&mut store, 1.0);
        assert!(store.grad(store.id_by_name("a").unwrap()).bits_eq(&before));
    }

    fn save_tiny(dir: &Path, name: &str, seed: u64) -> PathBuf {
        let model = Model::<f64>::new(
            Variant::TwoDSeq2Seq,
            ModelDims {
                src_vocab: 6,
                tgt_vocab: 5,
                embed: 2,
                hidden: 3,
            },
            seed,
        )
        .unwrap();
        let path = dir.join(name);
        save_checkpoint(&path, &model, seed, 2.0, "h").unwrap();
        path
    }

    #[test]
    fn averaging_matches_an_element_loop_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let paths = vec![
            save_tiny(dir.path(), "a.ckpt", 1),
            save_tiny(dir.path(), "b.ckpt", 2),
            save_tiny(dir.path(), "c.ckpt", 3),
        ];
        let (avg, meta) = average_checkpoints::<f64>(&paths).unwrap();
        assert_eq!(meta.step, 3);

        let models: Vec<Model<f64>> = paths
            .iter()
            .map(|p| load_checkpoint::<f64>(p).unwrap().0)
            .collect();
        for id in avg.store.ids() {
            let got = avg.store.value(id).data();
            for e in 0..got.len() {
                let mut sum = 0.0f64;
                for m in &models {
                    sum += m.store.value(id).data()[e];
                }
                let want = sum / 3.0;
                assert_eq!(got[e].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn averaging_identical_checkpoints_is_the_identity() {
        let dir = tempfile::tempdir().unwrap();
        let first = save_tiny(dir.path(), "a.ckpt", 7);
        let mut paths = vec![first.clone()];
        for name in ["b.ckpt", "c.ckpt", "d.ckpt"] {
            let p = dir.path().join(name);
            std::fs::copy(&first, &p).unwrap();
            paths.push(p);
        }
        let (avg, _) = average_checkpoints::<f64>(&paths).unwrap();
        let (orig, _) = load_checkpoint::<f64>(&first).unwrap();
        for (a, b) in avg.store.ids().zip(orig.store.ids()) {
            assert!(avg.store.value(a).bits_eq(orig.store.value(b)));
        }
    }

    #[test]
    fn averaging_rejects_mismatched_models() {
        let dir = tempfile::tempdir().unwrap();
        let a = save_tiny(dir.path(), "a.ckpt", 1);
        let other = Model::<f64>::new(
            Variant::Attention,
            ModelDims {
                src_vocab: 6,
                tgt_vocab: 5,
                embed: 2,
                hidden: 3,
            },
            1,
        )
        .unwrap();
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&b, &other, 1, 2.0, "h").unwrap();
        assert!(average_checkpoints::<f64>(&[a, b]).is_err());
        assert!(average_checkpoints::<f64>(&[]).is_err());
    }

    fn write_copy_task(dir: &Path, count: usize, seed: u64) -> (PathBuf, PathBuf) {
        let corpus = crate::data::generate_task(&crate::data::TaskSpec {
            kind: crate::data::TaskKind::Copy,
            vocab: 6,
            min_len: 1,
            max_len: 4,
            count,
            seed,
        })
        .unwrap();
        let src = dir.join(format!("{seed}.src"));
        let tgt = dir.join(format!("{seed}.tgt"));
        corpus.save(&src, &tgt).unwrap();
        (src, tgt)
    }

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let (train_src, train_tgt) = write_copy_task(dir, 24, 1);
        let (dev_src, dev_tgt) = write_copy_task(dir, 6, 2);
        RunConfig {
            model: Variant::TwoDSeq2Seq,
            hidden: 4,
            embed: 3,
            lr: 0.002,
            beam: 2,
            batch_size: 6,
            dropout: 0.2,
            clip: 1.0,
            seed: 5,
            epochs: 2,
            max_len: 50,
            vocab_size: 100,
            precision: crate::scalar::Dtype::F64,
            train_src: Some(train_src),
            train_tgt: Some(train_tgt),
            dev_src: Some(dev_src),
            dev_tgt: Some(dev_tgt),
        }
    }

    #[test]
    fn training_produces_logs_checkpoints_and_identical_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());

        let out_a = dir.path().join("run_a");
        let out_b = dir.path().join("run_b");
        let report_a = train::<f64>(&cfg, "hash", &out_a, 1).unwrap();
        let report_b = train::<f64>(&cfg, "hash", &out_b, 1).unwrap();

        // 2 epochs x 4 batches, dev eval at half and end of each epoch.
        assert_eq!(report_a.steps, 8);
        assert!(report_a.best.len() <= KEEP_CHECKPOINTS && !report_a.best.is_empty());
        assert!(report_a.averaged.exists());
        for w in report_a.best.windows(2) {
            assert!(w[0].0 <= w[1].0);
        }

        // Metrics: every line parses, dev_ppl only on eval steps.
        let text = std::fs::read_to_string(&report_a.metrics).unwrap();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 8);
        let evals = lines.iter().filter(|v| !v["dev_ppl"].is_null()).count();
        assert_eq!(evals, 4);
        for v in &lines {
            assert!(v["train_nll"].as_f64().unwrap().is_finite());
            assert!(v["wall_time"].as_f64().unwrap() >= 0.0);
        }

        // Reruns agree bit for bit everywhere except wall time.
        let text_b = std::fs::read_to_string(&report_b.metrics).unwrap();
        for (a, b) in text.lines().zip(text_b.lines()) {
            let mut va: serde_json::Value = serde_json::from_str(a).unwrap();
            let mut vb: serde_json::Value = serde_json::from_str(b).unwrap();
            va["wall_time"] = 0.into();
            vb["wall_time"] = 0.into();
            assert_eq!(va.to_string(), vb.to_string());
        }
        for (_, _, pa) in &report_a.best {
            let pb = out_b.join(pa.file_name().unwrap());
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(&pb).unwrap());
        }
        assert_eq!(
            std::fs::read(&report_a.averaged).unwrap(),
            std::fs::read(&report_b.averaged).unwrap()
        );

        // Vocabularies land next to the checkpoints.
        assert!(out_a.join("vocab.src").exists());
        assert!(out_a.join("vocab.tgt").exists());
    }

    #[test]
    fn training_is_invariant_to_worker_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.epochs = 1;

        let out_a = dir.path().join("w1");
        let out_b = dir.path().join("w3");
        let report_a = train::<f64>(&cfg, "h", &out_a, 1).unwrap();
        let report_b = train::<f64>(&cfg, "h", &out_b, 3).unwrap();
        assert_eq!(
            std::fs::read(&report_a.averaged).unwrap(),
            std::fs::read(&report_b.averaged).unwrap()
        );
    }
}
