//! Joint optimization of both reconstruction paths and the regularizers,
//! validation-based early stopping, and checkpoint directories.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{make_batches, Batch, MultiRefSample, Pairing, Vocabulary};
use crate::error::{Error, Result};
use crate::kv::{fmt_f64, KvBlock};
use crate::model::{LossBreakdown, LossSampler, ModelConfig, SpaceFusionModel};
use crate::neural::{AdamState, Array, ParameterSet};

pub const CHECKPOINT_FORMAT: &str = "spacefusion-ckpt-v1";
const PARAMS_MAGIC: &[u8; 8] = b"SFPARAM1";

/// Seed offset for the fixed noise and interpolation draws used on the validation set.
const VALIDATION_SEED_OFFSET: u64 = 0x5eed_0f_da7a;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// A batch loss above this (or non-finite) aborts training.
    pub spike_threshold: f64,
    pub pairing: Pairing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 50,
            patience: 3,
            seed: 0,
            spike_threshold: 1e4,
            pairing: Pairing::Flatten,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.spike_threshold > 0.0) {
            return Err(Error::Config("spike threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvBlock) {
        kv.set("learning_rate", fmt_f64(self.learning_rate));
        kv.set("batch_size", self.batch_size);
        kv.set("max_epochs", self.max_epochs);
        kv.set("patience", self.patience);
        kv.set("train_seed", self.seed);
        kv.set("spike_threshold", fmt_f64(self.spike_threshold));
        kv.set(
            "pairing",
            match self.pairing {
                Pairing::Flatten => "flatten",
                Pairing::SampleOne => "sample-one",
            },
        );
    }

    pub fn read_kv(kv: &KvBlock, base: &TrainConfig) -> Result<Self> {
        let pairing = match kv.get("pairing") {
            None => base.pairing,
            Some("flatten") => Pairing::Flatten,
            Some("sample-one") => Pairing::SampleOne,
            Some(other) => return Err(Error::Config(format!("unknown pairing {other:?}"))),
        };
        Ok(TrainConfig {
            learning_rate: kv.parse_or("learning_rate", base.learning_rate)?,
            batch_size: kv.parse_or("batch_size", base.batch_size)?,
            max_epochs: kv.parse_or("max_epochs", base.max_epochs)?,
            patience: kv.parse_or("patience", base.patience)?,
            seed: kv.parse_or("train_seed", base.seed)?,
            spike_threshold: kv.parse_or("spike_threshold", base.spike_threshold)?,
            pairing,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Means of the per-batch breakdowns over the epoch.
    pub train: LossBreakdown,
    pub valid_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_valid: Option<f64>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_total,train_recon_s2s,train_recon_ae,train_interp,train_fuse,valid_total";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch,
                fmt_f64(e.train.total),
                fmt_f64(e.train.recon_s2s),
                fmt_f64(e.train.recon_ae),
                fmt_f64(e.train.interp),
                fmt_f64(e.train.fuse),
                fmt_f64(e.valid_total)
            ));
        }
        out
    }
}

fn validation_batches(valid: &[MultiRefSample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    let batches = make_batches(valid, batch_size, Pairing::Flatten, seed)?;
    if !batches.is_empty() {
        return Ok(batches);
    }
    // too small to fill even one batch of two; fall back to every pair in one batch
    let pairs: Vec<(&[usize], &[usize])> = valid
        .iter()
        .flat_map(|s| s.responses.iter().map(move |r| (s.context.as_slice(), r.as_slice())))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Data("validation corpus needs at least two (context, response) pairs".into()));
    }
    Ok(vec![Batch::from_pairs(&pairs)?])
}

/// Mean total loss over `batches` with noise and interpolation weights fixed by `seed`.
pub fn evaluate_loss(model: &SpaceFusionModel, batches: &[Batch], seed: u64) -> Result<f64> {
    let mut sampler = LossSampler::new(seed);
    let mut sum = 0.0;
    for b in batches {
        sum += model.total_loss(b, &mut sampler)?.total;
    }
    Ok(sum / batches.len().max(1) as f64)
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        total: avg(|b| b.total),
        recon_s2s: avg(|b| b.recon_s2s),
        recon_ae: avg(|b| b.recon_ae),
        interp: avg(|b| b.interp),
        fuse: avg(|b| b.fuse),
        us: Vec::new(),
    }
}

/// Adam over shuffled batches with validation after each epoch. Stops at
/// `max_epochs` or after `patience` epochs without a new best validation loss,
/// and leaves `model` holding the best-validation parameters.
pub fn train(
    model: &mut SpaceFusionModel,
    train_samples: &[MultiRefSample],
    valid_samples: &[MultiRefSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with_progress(model, train_samples, valid_samples, config, |_| {})
}

pub fn train_with_progress(
    model: &mut SpaceFusionModel,
    train_samples: &[MultiRefSample],
    valid_samples: &[MultiRefSample],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate()?;
    if valid_samples.is_empty() {
        return Err(Error::Data("validation corpus is empty".into()));
    }
    if train_samples.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let valid_seed = config.seed.wrapping_add(VALIDATION_SEED_OFFSET);
    let valid_batches = validation_batches(valid_samples, config.batch_size, valid_seed)?;

    let mut adam = AdamState::new(model.params(), config.learning_rate);
    let mut sampler = LossSampler::new(config.seed);
    model.params_mut().zero_grads();

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_valid: None,
    };
    let mut best_params: Option<ParameterSet> = None;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(
            train_samples,
            config.batch_size,
            config.pairing,
            config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64),
        )?;
        if batches.is_empty() {
            return Err(Error::Data("training corpus yields no batch of at least two rows".into()));
        }
        let mut parts = Vec::with_capacity(batches.len());
        for (i, batch) in batches.iter().enumerate() {
            let loss = model.accumulate_gradients(batch, &mut sampler)?;
            if !loss.total.is_finite() || loss.total > config.spike_threshold {
                return Err(Error::Numerical(format!(
                    "epoch {epoch} batch {i}: loss {} (recon_s2s {}, recon_ae {}, interp {}, fuse {})",
                    loss.total, loss.recon_s2s, loss.recon_ae, loss.interp, loss.fuse
                )));
            }
            adam.step(model.params_mut());
            parts.push(loss);
        }
        let valid_total = evaluate_loss(model, &valid_batches, valid_seed)?;
        if !valid_total.is_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: validation loss {valid_total}")));
        }
        let log = EpochLog {
            epoch,
            train: mean_breakdown(&parts),
            valid_total,
        };
        progress(&log);
        report.epochs.push(log);

        if report.best_valid.map_or(true, |b| valid_total < b) {
            report.best_valid = Some(valid_total);
            report.best_epoch = Some(epoch);
            best_params = Some(model.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.params_mut().copy_values_from(&best)?;
    }
    Ok(report)
}

/// A loaded checkpoint directory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SpaceFusionModel,
    pub vocab: Vocabulary,
    pub train_config: Option<TrainConfig>,
    pub manifest: KvBlock,
}

/// Extra facts recorded in a manifest alongside the configs.
#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub train_config: Option<TrainConfig>,
    pub epoch: Option<usize>,
    pub valid_loss: Option<f64>,
}

fn encode_params(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_params(bytes: &[u8]) -> Result<ParameterSet> {
    let bad = |m: &str| Error::Checkpoint(format!("params.bin: {m}"));
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != PARAMS_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = u32_at(take(4)?);
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let raw = take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Array::from_vec(rows, cols, data)?)?;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}

/// Writes `manifest.txt`, `params.bin` and `vocab.txt` into `dir`.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &SpaceFusionModel, vocab: &Vocabulary, meta: &CheckpointMeta) -> Result<()> {
    let dir = dir.as_ref();
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let payload = encode_params(model.params());
    let mut manifest = KvBlock::new();
    manifest.set("format", CHECKPOINT_FORMAT);
    model.config().write_kv(&mut manifest);
    if let Some(tc) = &meta.train_config {
        tc.write_kv(&mut manifest);
    }
    if let Some(epoch) = meta.epoch {
        manifest.set("epoch", epoch);
    }
    if let Some(v) = meta.valid_loss {
        manifest.set("valid_loss", fmt_f64(v));
    }
    manifest.set("vocab_file", "vocab.txt");
    manifest.set("vocab_hash", vocab.hash());
    manifest.set("params_file", "params.bin");
    manifest.set("params_sha256", hex::encode(Sha256::digest(&payload)));

    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write("params.bin", &payload)?;
    write("vocab.txt", vocab.to_text().as_bytes())?;
    write("manifest.txt", manifest.to_text().as_bytes())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let manifest_text = String::from_utf8(read("manifest.txt")?)
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let first = manifest_text.lines().next().unwrap_or_default().trim();
    if first != format!("format={CHECKPOINT_FORMAT}") {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format line {first:?}; expected format={CHECKPOINT_FORMAT}"
        )));
    }
    let manifest = KvBlock::parse(&manifest_text)?;

    let payload = read(manifest.get("params_file").unwrap_or("params.bin"))?;
    let digest = hex::encode(Sha256::digest(&payload));
    if digest != manifest.require("params_sha256")? {
        return Err(Error::Checkpoint("params.bin does not match the hash in the manifest".into()));
    }
    let vocab_text = String::from_utf8(read(manifest.get("vocab_file").unwrap_or("vocab.txt"))?)
        .map_err(|_| Error::Checkpoint("vocabulary is not UTF-8".into()))?;
    let vocab = Vocabulary::from_text(&vocab_text)?;
    if vocab.hash() != manifest.require("vocab_hash")? {
        return Err(Error::Checkpoint("vocabulary file does not match the hash in the manifest".into()));
    }

    let config = ModelConfig::read_kv(&manifest, &ModelConfig::full(vocab.len()))?;
    let params = decode_params(&payload)?;
    let model = SpaceFusionModel::from_parameters(config, &params)?;
    let train_config = if manifest.contains("learning_rate") {
        Some(TrainConfig::read_kv(&manifest, &TrainConfig::default())?)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        vocab,
        train_config,
        manifest,
    })
}

/// Loads a checkpoint and insists that it was trained with `vocab`.
pub fn load_checkpoint_with_vocab(dir: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.vocab.hash() != vocab.hash() {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash {} does not match checkpoint vocabulary {}",
            vocab.hash(),
            ckpt.vocab.hash()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic};

    fn setup() -> (Vocabulary, Vec<MultiRefSample>, Vec<MultiRefSample>) {
        let texts = generate_synthetic(12, 2, 3).unwrap();
        let vocab = build_vocab(&texts, 200).unwrap();
        let samples: Vec<_> = texts.iter().map(|t| t.encode(&vocab)).collect();
        let (train, valid) = samples.split_at(9);
        (vocab, train.to_vec(), valid.to_vec())
    }

    fn small_model(vocab: &Vocabulary) -> SpaceFusionModel {
        let mut c = ModelConfig::desk(vocab.len()).with_hidden(8);
        c.embedding_dim = 8;
        SpaceFusionModel::new(c).unwrap()
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let (vocab, train_s, valid_s) = setup();
        let mut m = small_model(&vocab);
        let before = m.params().clone();
        let cfg = TrainConfig {
            max_epochs: 0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let report = train(&mut m, &train_s, &valid_s, &cfg).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let (vocab, train_s, valid_s) = setup();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 6,
            ..TrainConfig::default()
        };
        let mut a = small_model(&vocab);
        let mut b = small_model(&vocab);
        let ra = train(&mut a, &train_s, &valid_s, &cfg).unwrap();
        let rb = train(&mut b, &train_s, &valid_s, &cfg).unwrap();
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(a.params(), b.params());
        assert_eq!(ra.epochs.len(), 3);
    }

    #[test]
    fn empty_validation_is_rejected() {
        let (vocab, train_s, _) = setup();
        let mut m = small_model(&vocab);
        assert!(train(&mut m, &train_s, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn spike_guard_aborts() {
        let (vocab, train_s, valid_s) = setup();
        let mut m = small_model(&vocab);
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 1,
            batch_size: 6,
            spike_threshold: 1e-3,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut m, &train_s, &valid_s, &cfg), Err(Error::Numerical(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 9, max_epochs: 4, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        let mut kv = KvBlock::new();
        let tc = TrainConfig { pairing: Pairing::SampleOne, seed: 4, ..TrainConfig::default() };
        tc.write_kv(&mut kv);
        assert_eq!(TrainConfig::read_kv(&kv, &TrainConfig::default()).unwrap(), tc);
    }

    #[test]
    fn params_codec_rejects_corruption() {
        let (vocab, ..) = setup();
        let m = small_model(&vocab);
        let bytes = encode_params(m.params());
        assert_eq!(&decode_params(&bytes).unwrap(), m.params());
        assert!(decode_params(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_params(&bad).is_err());
    }
}
