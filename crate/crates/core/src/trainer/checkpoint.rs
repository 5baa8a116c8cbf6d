//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic, a `u32` header length and that many bytes of
//! `key=value` lines, then tensors as (`u32` name length, name, `u32` rank,
//! `u64` dims, `f64` values), all little-endian, then a CRC32 of everything
//! after the magic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{EpochLog, OptimizerKind, OptimizerState, TrainConfig, TrainError};
use crate::aet::{self, AetConfig};
use crate::autodiff::Tensor;
use crate::corpus::TargetSource;
use crate::metrics::LossKind;
use crate::separator::{
    build_model, FrontendKind, ModelConfig, SeparationModel, SeparatorConfig, StftGeometry,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AETSEPv1";
pub const FORMAT_VERSION: u32 = 1;

/// A model plus everything needed to resume or reuse it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SeparationModel,
    /// Seed the model was initialized from.
    pub init_seed: u64,
    pub target: TargetSource,
    pub sample_rate: u32,
    pub train: TrainConfig,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    /// Wraps a model with fresh optimizer state and an empty log.
    pub fn fresh(
        model: SeparationModel,
        init_seed: u64,
        target: TargetSource,
        sample_rate: u32,
        train: TrainConfig,
    ) -> Self {
        let optimizer = OptimizerState::for_model(&model);
        Self {
            model,
            init_seed,
            target,
            sample_rate,
            train,
            optimizer,
            log: Vec::new(),
        }
    }
}

fn header_text(c: &Checkpoint) -> String {
    let m = &c.model.config;
    let t = &c.train;
    let mut kv: Vec<(String, String)> = vec![
        ("format_version".into(), FORMAT_VERSION.to_string()),
        ("frontend".into(), m.frontend.name().into()),
        ("init_seed".into(), c.init_seed.to_string()),
        ("aet.num_filters".into(), m.aet.num_filters.to_string()),
        ("aet.filter_width".into(), m.aet.filter_width.to_string()),
        ("aet.pool".into(), m.aet.pool.to_string()),
        (
            "aet.smoothing_length".into(),
            m.aet.smoothing_length.to_string(),
        ),
        ("aet.tied".into(), m.aet.tied.to_string()),
        (
            "aet.placement".into(),
            aet::placement_name(m.aet.placement).into(),
        ),
        ("stft.n_fft".into(), m.stft.n_fft.to_string()),
        ("stft.hop".into(), m.stft.hop.to_string()),
        ("separator.hidden".into(), m.separator.hidden.to_string()),
        (
            "separator.hidden_layers".into(),
            m.separator.hidden_layers.to_string(),
        ),
        ("sample_rate".into(), c.sample_rate.to_string()),
        ("target".into(), target_name(c.target).into()),
        ("train.loss".into(), t.loss.name().into()),
        ("train.epochs".into(), t.epochs.to_string()),
        ("train.batch_size".into(), t.batch_size.to_string()),
        ("train.dropout".into(), t.dropout.to_string()),
        ("train.optimizer".into(), t.optimizer.name().into()),
        ("train.learning_rate".into(), t.learning_rate.to_string()),
        ("train.seed".into(), t.seed.to_string()),
        ("train.segment_len".into(), t.segment_len.to_string()),
        (
            "train.batches_per_epoch".into(),
            t.batches_per_epoch
                .map(|b| b.to_string())
                .unwrap_or_default(),
        ),
        ("optimizer.step".into(), c.optimizer.step.to_string()),
        ("log.count".into(), c.log.len().to_string()),
    ];
    for (i, e) in c.log.iter().enumerate() {
        kv.push((
            format!("log.{i}"),
            format!("{},{},{}", e.epoch, e.train_loss, e.val_sdr_db),
        ));
    }
    kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn target_name(t: TargetSource) -> &'static str {
    match t {
        TargetSource::A => "a",
        TargetSource::B => "b",
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let header = header_text(c);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    let params = c.model.parameters();
    for (name, t) in &params {
        put_tensor(&mut out, name, t);
    }
    for ((name, _), m) in params.iter().zip(&c.optimizer.first) {
        put_tensor(&mut out, &format!("opt.m.{name}"), m);
    }
    for ((name, _), v) in params.iter().zip(&c.optimizer.second) {
        put_tensor(&mut out, &format!("opt.v.{name}"), v);
    }
    let crc = crc32fast::hash(&out[CHECKPOINT_MAGIC.len()..]);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated while reading {what}")),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, String> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

struct Header(BTreeMap<String, String>);

impl Header {
    fn raw(&self, key: &str) -> Result<&str, String> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format!("header is missing `{key}`"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, String> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| format!("header `{key}` has invalid value `{raw}`"))
    }
}

fn parse_header(text: &str) -> Result<Header, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed header line `{line}`"))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(Header(map))
}

fn model_config(h: &Header) -> Result<ModelConfig, String> {
    let frontend_name = h.raw("frontend")?;
    let frontend = FrontendKind::parse(frontend_name)
        .ok_or_else(|| format!("unknown front-end `{frontend_name}`"))?;
    let placement_name = h.raw("aet.placement")?;
    let placement = aet::parse_placement(placement_name)
        .ok_or_else(|| format!("unknown unpool placement `{placement_name}`"))?;
    Ok(ModelConfig {
        frontend,
        aet: AetConfig {
            num_filters: h.parse("aet.num_filters")?,
            filter_width: h.parse("aet.filter_width")?,
            pool: h.parse("aet.pool")?,
            smoothing_length: h.parse("aet.smoothing_length")?,
            tied: h.parse("aet.tied")?,
            placement,
        },
        stft: StftGeometry {
            n_fft: h.parse("stft.n_fft")?,
            hop: h.parse("stft.hop")?,
        },
        separator: SeparatorConfig {
            hidden: h.parse("separator.hidden")?,
            hidden_layers: h.parse("separator.hidden_layers")?,
        },
    })
}

fn train_config(h: &Header) -> Result<TrainConfig, String> {
    let loss: LossKind = h.parse("train.loss")?;
    let opt_name = h.raw("train.optimizer")?;
    let optimizer =
        OptimizerKind::parse(opt_name).ok_or_else(|| format!("unknown optimizer `{opt_name}`"))?;
    let batches = h.raw("train.batches_per_epoch")?;
    Ok(TrainConfig {
        loss,
        epochs: h.parse("train.epochs")?,
        batch_size: h.parse("train.batch_size")?,
        dropout: h.parse("train.dropout")?,
        optimizer,
        learning_rate: h.parse("train.learning_rate")?,
        seed: h.parse("train.seed")?,
        segment_len: h.parse("train.segment_len")?,
        batches_per_epoch: if batches.is_empty() {
            None
        } else {
            Some(
                batches
                    .parse()
                    .map_err(|_| format!("invalid batches_per_epoch `{batches}`"))?,
            )
        },
    })
}

fn training_log(h: &Header) -> Result<Vec<EpochLog>, String> {
    let count: usize = h.parse("log.count")?;
    (0..count)
        .map(|i| {
            let key = format!("log.{i}");
            let raw = h.raw(&key)?;
            let parts: Vec<&str> = raw.split(',').collect();
            let bad = || format!("header `{key}` has invalid value `{raw}`");
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(EpochLog {
                epoch: parts[0].parse().map_err(|_| bad())?,
                train_loss: parts[1].parse().map_err(|_| bad())?,
                val_sdr_db: parts[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Parses and verifies a checkpoint. Nothing is returned unless every check
/// passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, String> {
    let magic_len = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic_len || bytes[..magic_len - 1] != CHECKPOINT_MAGIC[..magic_len - 1] {
        return Err("not a checkpoint (bad magic)".into());
    }
    if bytes[magic_len - 1] != CHECKPOINT_MAGIC[magic_len - 1] {
        return Err(format!(
            "unsupported checkpoint version `{}`, expected `{}`",
            String::from_utf8_lossy(&bytes[..magic_len]),
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        ));
    }
    if bytes.len() < magic_len + 8 {
        return Err("truncated checkpoint".into());
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[magic_len..body_end]);
    if stored != actual {
        return Err(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        ));
    }
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: magic_len,
    };
    let header_len = r.u32("header length")? as usize;
    let header_bytes = r.take(header_len, "header")?;
    let text = std::str::from_utf8(header_bytes).map_err(|_| "header is not UTF-8".to_string())?;
    let header = parse_header(text)?;
    let version: u32 = header.parse("format_version")?;
    if version != FORMAT_VERSION {
        return Err(format!(
            "unsupported checkpoint format version {version}, expected {FORMAT_VERSION}"
        ));
    }

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while r.pos < r.bytes.len() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("tensor dims")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("tensor `{name}` has an overflowing shape"))?;
        let raw = r.take(
            count.checked_mul(8).ok_or("tensor too large")?,
            "tensor values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate tensor `{name}`"));
        }
    }

    let config = model_config(&header)?;
    let init_seed: u64 = header.parse("init_seed")?;
    let mut model = build_model(config, init_seed).map_err(|e| e.to_string())?;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut take = |name: &str, like: &[usize]| -> Result<Tensor, String> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| format!("missing tensor `{name}`"))?;
        if t.shape() != like {
            return Err(format!(
                "tensor `{name}` has shape {:?}, expected {like:?}",
                t.shape()
            ));
        }
        Ok(t)
    };
    let mut first = Vec::with_capacity(names.len());
    let mut second = Vec::with_capacity(names.len());
    for (name, slot) in names.iter().zip(model.parameters_mut()) {
        let shape = slot.shape().to_vec();
        *slot = take(name, &shape)?;
        first.push(take(&format!("opt.m.{name}"), &shape)?);
        second.push(take(&format!("opt.v.{name}"), &shape)?);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(format!("unexpected tensor `{extra}`"));
    }
    let target = match header.raw("target")? {
        "a" => TargetSource::A,
        "b" => TargetSource::B,
        other => return Err(format!("unknown target `{other}`")),
    };
    Ok(Checkpoint {
        model,
        init_seed,
        target,
        sample_rate: header.parse("sample_rate")?,
        train: train_config(&header)?,
        optimizer: OptimizerState {
            step: header.parse("optimizer.step")?,
            first,
            second,
        },
        log: training_log(&header)?,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, encode_checkpoint(c)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes).map_err(|message| TrainError::Checkpoint {
        path: path.display().to_string(),
        message,
    })
}
