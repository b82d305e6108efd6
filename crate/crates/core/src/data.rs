//! Vocabularies, parallel corpora, synthetic task generation, and the BLEU,
//! perplexity and exact-match metrics.
//!
//! Tokenization is whitespace splitting only; corpus files are UTF-8 with one
//! sentence per line.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token to id bijection with four reserved ids.
///
/// The on-disk format lists only the learned tokens, one per line; the line
/// number equals id minus four, with the reserved ids implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_learned(learned: Vec<String>) -> Result<Vocabulary> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(learned);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Count tokens over whitespace-split lines and keep the most frequent,
    /// ties broken lexicographically. `max_size` bounds the total size
    /// including the four reserved ids.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocabulary> {
        if max_size <= RESERVED_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room for tokens"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for line in lines {
            any = true;
            for tok in line.split_whitespace() {
                if RESERVED_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut by_freq: Vec<(&str, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        by_freq.truncate(max_size - RESERVED_TOKENS.len());
        Vocabulary::from_learned(by_freq.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        toks.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[RESERVED_TOKENS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        let learned: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocabulary::from_learned(learned)
    }
}

/// Aligned source and target sentences.
#[derive(Clone, Debug, Default)]
pub struct ParallelCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl ParallelCorpus {
    /// Load a pair of files with equal line counts, dropping pairs where
    /// either side has no tokens.
    pub fn load(src_path: &Path, tgt_path: &Path) -> Result<ParallelCorpus> {
        let src_text = std::fs::read_to_string(src_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", src_path.display())))?;
        let tgt_text = std::fs::read_to_string(tgt_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", tgt_path.display())))?;
        let src_lines: Vec<&str> = src_text.lines().collect();
        let tgt_lines: Vec<&str> = tgt_text.lines().collect();
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::Data(format!(
                "{} has {} lines but {} has {}",
                src_path.display(),
                src_lines.len(),
                tgt_path.display(),
                tgt_lines.len()
            )));
        }
        let mut corpus = ParallelCorpus::default();
        for (s, t) in src_lines.iter().zip(&tgt_lines) {
            if s.split_whitespace().next().is_none() || t.split_whitespace().next().is_none() {
                continue;
            }
            corpus.src.push(s.to_string());
            corpus.tgt.push(t.to_string());
        }
        Ok(corpus)
    }

    pub fn save(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        let mut s = String::new();
        for line in &self.src {
            s.push_str(line);
            s.push('\n');
        }
        std::fs::write(src_path, s)?;
        let mut t = String::new();
        for line in &self.tgt {
            t.push_str(line);
            t.push('\n');
        }
        std::fs::write(tgt_path, t)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Pairs where both sides have at most `max_tokens` tokens.
    pub fn filtered_by_len(&self, max_tokens: usize) -> ParallelCorpus {
        let mut out = ParallelCorpus::default();
        for (s, t) in self.src.iter().zip(&self.tgt) {
            if s.split_whitespace().count() <= max_tokens
                && t.split_whitespace().count() <= max_tokens
            {
                out.src.push(s.clone());
                out.tgt.push(t.clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    DigitToWord,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<TaskKind> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "digit-to-word" => Ok(TaskKind::DigitToWord),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected copy, reverse or digit-to-word"
            ))),
        }
    }
}

const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Synthetic task description; generation is deterministic under `seed`.
#[derive(Clone, Copy, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of distinct source symbols (capped at 10 for digit-to-word).
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub seed: u64,
}

impl TaskSpec {
    fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::Config("task vocab must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid task length range {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("task sample count must be positive".into()));
        }
        Ok(())
    }
}

/// Generate a synthetic parallel corpus: copy (target = source), reverse
/// (target = source reversed), or digit-to-word (digits to number words).
pub fn generate_task(spec: &TaskSpec) -> Result<ParallelCorpus> {
    spec.validate()?;
    let symbols = match spec.kind {
        TaskKind::DigitToWord => spec.vocab.min(10),
        _ => spec.vocab,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = ParallelCorpus::default();
    for _ in 0..spec.count {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..symbols)).collect();
        let src: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        let tgt: Vec<String> = match spec.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().cloned().collect(),
            TaskKind::DigitToWord => ids.iter().map(|&i| DIGIT_WORDS[i].to_string()).collect(),
        };
        corpus.src.push(src.join(" "));
        corpus.tgt.push(tgt.join(" "));
    }
    Ok(corpus)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram
/// precisions for n = 1..max_ngram times the brevity penalty, unsmoothed.
/// A zero precision at any order gives 0.
pub fn bleu(hyps: &[String], refs: &[String], max_ngram: usize, case_sensitive: bool) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Data("empty hypothesis set".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_ngram == 0 {
        return Err(Error::Config("max_ngram must be positive".into()));
    }

    let norm = |line: &str| -> Vec<String> {
        line.split_whitespace()
            .map(|t| {
                if case_sensitive {
                    t.to_string()
                } else {
                    t.to_lowercase()
                }
            })
            .collect()
    };

    let mut matched = vec![0usize; max_ngram];
    let mut total = vec![0usize; max_ngram];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let h = norm(h);
        let r = norm(r);
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_ngram {
            if h.len() < n {
                continue;
            }
            total[n - 1] += h.len() - n + 1;
            let rc = ngram_counts(&r, n);
            for (gram, count) in ngram_counts(&h, n) {
                let clip = rc.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for n in 0..max_ngram {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / max_ngram as f64).exp() * 100.0)
}

/// Fraction of hypotheses whose token sequence equals the reference's.
pub fn exact_match(hyps: &[String], refs: &[String]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Data("exact match needs equal nonempty line counts".into()));
    }
    let hits = hyps
        .iter()
        .zip(refs)
        .filter(|(h, r)| {
            h.split_whitespace().collect::<Vec<_>>() == r.split_whitespace().collect::<Vec<_>>()
        })
        .count();
    Ok(hits as f64 / hyps.len() as f64)
}

/// Teacher-forced perplexity over encoded sentence pairs:
/// exp(total NLL / total target tokens), the terminator counted per sentence.
pub fn corpus_perplexity<F: Scalar>(
    model: &Model<F>,
    pairs: &[(Vec<u32>, Vec<u32>)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("perplexity over an empty corpus".into()));
    }
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for (src, tgt) in pairs {
        let (nll, tokens) = model.sentence_nll(src, tgt)?;
        total_nll += nll;
        total_tokens += tokens;
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// Encode both sides of a corpus with the given vocabularies.
pub fn encode_corpus(
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Vec<(Vec<u32>, Vec<u32>)> {
    corpus
        .src
        .iter()
        .zip(&corpus.tgt)
        .map(|(s, t)| (src_vocab.encode_line(s), tgt_vocab.encode_line(t)))
        .collect()
}
