//! Checkpoint and run-configuration file formats.
//!
//! A checkpoint is one file: a line-oriented ASCII manifest (format version,
//! dtype, model identity, step, dev perplexity, config hash, and one
//! name/shape line per parameter in registration order) followed by the raw
//! little-endian IEEE-754 parameter payload in the same order. Loading a
//! 32-bit checkpoint into a 64-bit model widens losslessly; the narrowing
//! direction is rejected.
//!
//! Run configuration is a flat `key = value` file. Unknown and duplicate keys
//! are errors; full-line `#` comments and blank lines are ignored.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, Variant};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &str = "gridseq checkpoint v1";

/// Everything a checkpoint records besides the parameters themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub dims: ModelDims,
    pub dtype: Dtype,
    pub step: u64,
    pub dev_ppl: f64,
    pub config_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &Model<F>,
    step: u64,
    dev_ppl: f64,
    config_hash: &str,
) -> Result<()> {
    let dims = model.dims();
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("dtype {}\n", F::DTYPE.name()));
    header.push_str(&format!("variant {}\n", model.variant()));
    header.push_str(&format!("src_vocab {}\n", dims.src_vocab));
    header.push_str(&format!("tgt_vocab {}\n", dims.tgt_vocab));
    header.push_str(&format!("embed {}\n", dims.embed));
    header.push_str(&format!("hidden {}\n", dims.hidden));
    header.push_str(&format!("step {step}\n"));
    header.push_str(&format!("dev_ppl {dev_ppl}\n"));
    let hash = if config_hash.is_empty() { "-" } else { config_hash };
    header.push_str(&format!("config_hash {hash}\n"));
    header.push_str(&format!("params {}\n", model.store.len()));
    for id in model.store.ids() {
        let t = model.store.value(id);
        let (rows, cols) = t.shape();
        header.push_str(&format!("{} {rows} {cols}\n", model.store.name(id)));
    }

    let payload_len = model.store.num_elements() * F::DTYPE.size_bytes();
    let mut bytes = Vec::with_capacity(header.len() + 32 + payload_len);
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(format!("payload {payload_len}\n").as_bytes());
    for id in model.store.ids() {
        for &v in model.store.value(id).data() {
            v.write_le(&mut bytes);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

struct RawCheckpoint {
    meta: CheckpointMeta,
    names: Vec<(String, usize, usize)>,
    payload: Vec<u8>,
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut pos = 0usize;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt(path, "truncated header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| corrupt(path, "non-UTF-8 header"))?;
        pos += end + 1;
        Ok(line)
    };

    if next_line()? != MAGIC {
        return Err(corrupt(path, "not a checkpoint file (bad magic line)"));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = next_line()?;
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| corrupt(path, "malformed header line"))?;
        if k != key {
            return Err(corrupt(path, &format!("expected header field {key}, found {k}")));
        }
        Ok(v.to_string())
    };

    let dtype = Dtype::parse(&field("dtype")?)
        .ok_or_else(|| corrupt(path, "unknown dtype"))?;
    let variant: Variant = field("variant")?.parse()?;
    let parse_usize = |v: String, what: &str| -> Result<usize> {
        v.parse().map_err(|_| corrupt(path, &format!("bad {what}")))
    };
    let src_vocab = parse_usize(field("src_vocab")?, "src_vocab")?;
    let tgt_vocab = parse_usize(field("tgt_vocab")?, "tgt_vocab")?;
    let embed = parse_usize(field("embed")?, "embed")?;
    let hidden = parse_usize(field("hidden")?, "hidden")?;
    let step: u64 = field("step")?
        .parse()
        .map_err(|_| corrupt(path, "bad step"))?;
    let dev_ppl: f64 = field("dev_ppl")?
        .parse()
        .map_err(|_| corrupt(path, "bad dev_ppl"))?;
    let config_hash = field("config_hash")?;
    let n_params = parse_usize(field("params")?, "params count")?;

    let mut names = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let line = next_line()?;
        let mut it = line.split(' ');
        let name = it.next().ok_or_else(|| corrupt(path, "bad param line"))?.to_string();
        let rows: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(path, "bad param rows"))?;
        let cols: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(path, "bad param cols"))?;
        if it.next().is_some() {
            return Err(corrupt(path, "trailing junk on param line"));
        }
        names.push((name, rows, cols));
    }

    let payload_line = next_line()?.to_string();
    let payload_len: usize = payload_line
        .strip_prefix("payload ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt(path, "bad payload line"))?;
    let payload = bytes[pos..].to_vec();
    if payload.len() != payload_len {
        return Err(corrupt(
            path,
            &format!("payload is {} bytes, expected {payload_len}", payload.len()),
        ));
    }
    let want: usize = names.iter().map(|(_, r, c)| r * c).sum::<usize>() * dtype.size_bytes();
    if payload_len != want {
        return Err(corrupt(path, "payload length disagrees with parameter shapes"));
    }

    Ok(RawCheckpoint {
        meta: CheckpointMeta {
            variant,
            dims: ModelDims {
                src_vocab,
                tgt_vocab,
                embed,
                hidden,
            },
            dtype,
            step,
            dev_ppl,
            config_hash,
        },
        names,
        payload,
    })
}

/// Read just the manifest.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointMeta> {
    Ok(read_raw(path)?.meta)
}

/// Load a checkpoint into a freshly built model of scalar type `F`.
/// A narrower stored dtype is widened element by element; loading a wider
/// checkpoint into a narrower model is an error.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(Model<F>, CheckpointMeta)> {
    let raw = read_raw(path)?;
    if raw.meta.dtype.size_bytes() > F::DTYPE.size_bytes() {
        return Err(Error::Checkpoint(format!(
            "{}: cannot load {} values into an {} model (narrowing)",
            path.display(),
            raw.meta.dtype.name(),
            F::DTYPE.name()
        )));
    }

    let mut model = Model::<F>::new(raw.meta.variant, raw.meta.dims, 0)?;
    if model.store.len() != raw.names.len() {
        return Err(corrupt(path, "parameter count disagrees with model layout"));
    }
    let ids: Vec<_> = model.store.ids().collect();
    let elem = raw.meta.dtype.size_bytes();
    let mut offset = 0usize;
    for (id, (name, rows, cols)) in ids.into_iter().zip(&raw.names) {
        if model.store.name(id) != name || model.store.value(id).shape() != (*rows, *cols) {
            return Err(corrupt(
                path,
                &format!("parameter {name} does not match the model layout"),
            ));
        }
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let at = offset + k * elem;
            let v = match raw.meta.dtype {
                Dtype::F32 => f32::read_le(&raw.payload[at..at + 4]).to_f64(),
                Dtype::F64 => f64::read_le(&raw.payload[at..at + 8]),
            };
            data.push(F::from_f64(v));
        }
        offset += n * elem;
        *model.store.value_mut(id) = Tensor::new(*rows, *cols, data)?;
    }
    Ok((model, raw.meta))
}

fn default_lr(variant: Variant) -> f64 {
    if variant.is_grid() {
        0.0005
    } else {
        0.001
    }
}

/// Resolved run configuration with every default applied.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: Variant,
    pub hidden: usize,
    pub embed: usize,
    pub lr: f64,
    pub beam: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub clip: f64,
    pub seed: u64,
    pub epochs: usize,
    /// Training sentence-pair length filter, in tokens per side.
    pub max_len: usize,
    pub vocab_size: usize,
    pub precision: Dtype,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: Variant::TwoDSeq2Seq,
            hidden: 64,
            embed: 64,
            lr: default_lr(Variant::TwoDSeq2Seq),
            beam: 12,
            batch_size: 50,
            dropout: 0.3,
            clip: 1.0,
            seed: 1,
            epochs: 10,
            max_len: 50,
            vocab_size: 50000,
            precision: Dtype::F64,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
        }
    }
}

impl RunConfig {
    /// Parse `key = value` text. The learning-rate default depends on the
    /// model family, so an explicit `lr` always wins but the fallback is
    /// resolved after `model` is known.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut seen: HashMap<String, String> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if value.is_empty() {
                return Err(Error::Config(format!("line {}: empty value for {key}", lineno + 1)));
            }
            if seen.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
        }

        let mut cfg = RunConfig::default();
        let mut explicit_lr = None;
        for (key, value) in &seen {
            let parse_num = |what: &str| -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad numeric value for {what}: {value:?}")))
            };
            match key.as_str() {
                "model" => cfg.model = value.parse()?,
                "hidden" => cfg.hidden = parse_num("hidden")? as usize,
                "embed" => cfg.embed = parse_num("embed")? as usize,
                "lr" => explicit_lr = Some(parse_num("lr")?),
                "beam" => cfg.beam = parse_num("beam")? as usize,
                "batch_size" => cfg.batch_size = parse_num("batch_size")? as usize,
                "dropout" => cfg.dropout = parse_num("dropout")?,
                "clip" => cfg.clip = parse_num("clip")?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed: {value:?}")))?
                }
                "epochs" => cfg.epochs = parse_num("epochs")? as usize,
                "max_len" => cfg.max_len = parse_num("max_len")? as usize,
                "vocab_size" => cfg.vocab_size = parse_num("vocab_size")? as usize,
                "precision" => {
                    cfg.precision = Dtype::parse(value)
                        .ok_or_else(|| Error::Config(format!("bad precision: {value:?}")))?
                }
                "train_src" => cfg.train_src = Some(PathBuf::from(value)),
                "train_tgt" => cfg.train_tgt = Some(PathBuf::from(value)),
                "dev_src" => cfg.dev_src = Some(PathBuf::from(value)),
                "dev_tgt" => cfg.dev_tgt = Some(PathBuf::from(value)),
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        cfg.lr = explicit_lr.unwrap_or_else(|| default_lr(cfg.model));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file; also returns the SHA-256 of its raw bytes, which
    /// checkpoints record for provenance.
    pub fn load(path: &Path) -> Result<(RunConfig, String)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Ok((RunConfig::parse(&text)?, sha256_hex(&bytes)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::Config("hidden and embed must be positive".into()));
        }
        if self.beam == 0 || self.batch_size == 0 || self.epochs == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "beam, batch_size, epochs and max_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.vocab_size <= 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond reserved ids",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> Model<f64> {
        Model::new(
            Variant::Coverage,
            ModelDims {
                src_vocab: 7,
                tgt_vocab: 6,
                embed: 3,
                hidden: 4,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let model = small_model(42);
        save_checkpoint(&a, &model, 17, 3.25, "deadbeef").unwrap();

        let (loaded, meta) = load_checkpoint::<f64>(&a).unwrap();
        assert_eq!(meta.step, 17);
        assert_eq!(meta.dev_ppl, 3.25);
        assert_eq!(meta.config_hash, "deadbeef");
        assert_eq!(meta.variant, Variant::Coverage);
        assert_eq!(meta.dims, model.dims());
        for (x, y) in model.store.ids().zip(loaded.store.ids()) {
            assert!(model.store.value(x).bits_eq(loaded.store.value(y)));
        }

        save_checkpoint(&b, &loaded, meta.step, meta.dev_ppl, &meta.config_hash).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn awkward_metadata_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let model = small_model(1);
        let ppl = 1.0000000000000002f64;
        save_checkpoint(&p, &model, u64::MAX, ppl, "").unwrap();
        let meta = peek_checkpoint(&p).unwrap();
        assert_eq!(meta.dev_ppl.to_bits(), ppl.to_bits());
        assert_eq!(meta.step, u64::MAX);
        assert_eq!(meta.config_hash, "-");

        save_checkpoint(&p, &model, 0, f64::NAN, "h").unwrap();
        assert!(peek_checkpoint(&p).unwrap().dev_ppl.is_nan());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let model = small_model(3);
        save_checkpoint(&p, &model, 1, 2.0, "h").unwrap();
        let good = std::fs::read(&p).unwrap();

        // Truncated payload.
        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(load_checkpoint::<f64>(&p).is_err());

        // Bad magic.
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        std::fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint::<f64>(&p).is_err());

        // Tampered parameter shape.
        let text_end = good.windows(8).position(|w| w == b"payload ").unwrap();
        let header = String::from_utf8(good[..text_end].to_vec()).unwrap();
        let tampered = header.replacen("src_embed 7 3", "src_embed 3 7", 1);
        assert_ne!(header, tampered);
        let mut bytes = tampered.into_bytes();
        bytes.extend_from_slice(&good[text_end..]);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_checkpoint::<f64>(&p).is_err());
    }

    #[test]
    fn narrow_checkpoints_widen_and_wide_ones_do_not_narrow() {
        let dir = tempfile::tempdir().unwrap();
        let p32 = dir.path().join("m32.ckpt");
        let p64 = dir.path().join("m64.ckpt");

        let m32 = Model::<f32>::new(
            Variant::TwoDSeq2Seq,
            ModelDims {
                src_vocab: 6,
                tgt_vocab: 5,
                embed: 2,
                hidden: 3,
            },
            9,
        )
        .unwrap();
        save_checkpoint(&p32, &m32, 5, 1.5, "h").unwrap();

        let (wide, meta) = load_checkpoint::<f64>(&p32).unwrap();
        assert_eq!(meta.dtype, Dtype::F32);
        for (a, b) in m32.store.ids().zip(wide.store.ids()) {
            let narrow = m32.store.value(a);
            let widened = wide.store.value(b);
            for (x, y) in narrow.data().iter().zip(widened.data()) {
                assert_eq!(f64::from(*x).to_bits(), y.to_bits());
            }
        }

        let m64 = small_model(4);
        save_checkpoint(&p64, &m64, 5, 1.5, "h").unwrap();
        let err = match load_checkpoint::<f32>(&p64) {
            Err(e) => e,
            Ok(_) => panic!("narrowing load should fail"),
        };
        assert!(err.to_string().contains("narrowing"), "{err}");
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.beam, 12);
        assert_eq!(cfg.clip, 1.0);
        assert_eq!(cfg.dropout, 0.3);
        assert_eq!(cfg.batch_size, 50);
        assert_eq!(cfg.lr, 0.0005);

        let cfg = RunConfig::parse(
            "# comment\n\nmodel = attention\nhidden= 16\nembed =8\nseed = 7\ntrain_src = a.txt\n",
        )
        .unwrap();
        assert_eq!(cfg.model, Variant::Attention);
        assert_eq!(cfg.hidden, 16);
        assert_eq!(cfg.embed, 8);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train_src, Some(PathBuf::from("a.txt")));
        // Attention-family learning rate default.
        assert_eq!(cfg.lr, 0.001);

        let cfg = RunConfig::parse("model = attention\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn config_rejects_unknown_duplicate_and_invalid() {
        assert!(RunConfig::parse("learning_rate = 1\n").is_err());
        assert!(RunConfig::parse("lr = 0.1\nlr = 0.2\n").is_err());
        assert!(RunConfig::parse("dropout = 1.0\n").is_err());
        assert!(RunConfig::parse("dropout = -0.1\n").is_err());
        assert!(RunConfig::parse("clip = 0\n").is_err());
        assert!(RunConfig::parse("beam = 0\n").is_err());
        assert!(RunConfig::parse("model = transformer\n").is_err());
        assert!(RunConfig::parse("hidden\n").is_err());
        assert!(RunConfig::parse("precision = f16\n").is_err());
        assert!(RunConfig::parse("vocab_size = 4\n").is_err());
    }

    #[test]
    fn config_load_hashes_the_raw_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "seed = 3\n").unwrap();
        let (cfg, h1) = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 3);
        let (_, h2) = RunConfig::load(&p).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
        std::fs::write(&p, "seed = 4\n").unwrap();
        let (_, h3) = RunConfig::load(&p).unwrap();
        assert_ne!(h1, h3);
    }
}
