//! Audio ingestion and the experiment data protocol: 0 dB mixing of
//! speaker pairs, the per-pair train/test split, and segment batching.

mod synth;
mod wav;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub use synth::{band_limited_noise, smoke_mixture};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav, SampleFormat};

/// Joint scale applied when a mixture would exceed this peak.
pub const CLIP_LIMIT: f64 = 0.99;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed WAV: {0}")]
    Wav(String),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("silent input: RMS is zero")]
    Silent,
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),
    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid segmenting: {0}")]
    Segments(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Mono signal with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, CorpusError> {
        if sample_rate == 0 {
            return Err(CorpusError::InvalidWaveform(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::InvalidWaveform(format!(
                "sample {i} is not finite"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    fn scaled(&self, factor: f64, len: usize) -> Self {
        let mut samples: Vec<f64> = self.samples.iter().map(|v| v * factor).collect();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    A,
    B,
}

impl TargetSource {
    pub fn index(self) -> usize {
        match self {
            TargetSource::A => 0,
            TargetSource::B => 1,
        }
    }
}

/// Two sources at equal energy and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePair {
    pub mixture: Waveform,
    pub source_a: Waveform,
    pub source_b: Waveform,
    pub pair_id: String,
    pub sentence_id: String,
}

impl MixturePair {
    pub fn target(&self, which: TargetSource) -> &Waveform {
        match which {
            TargetSource::A => &self.source_a,
            TargetSource::B => &self.source_b,
        }
    }
}

/// Scales `b` to the RMS of `a` (measured before padding), zero-pads the
/// shorter signal, and sums. If the mixture peak exceeds [`CLIP_LIMIT`], all
/// three signals are scaled jointly so the sum stays exact.
pub fn mix_at_0db(a: &Waveform, b: &Waveform) -> Result<MixturePair, CorpusError> {
    if a.sample_rate() != b.sample_rate() {
        return Err(CorpusError::RateMismatch(a.sample_rate(), b.sample_rate()));
    }
    let (ra, rb) = (a.rms(), b.rms());
    if ra == 0.0 || rb == 0.0 {
        return Err(CorpusError::Silent);
    }
    let len = a.len().max(b.len());
    let mut sa = a.scaled(1.0, len);
    let mut sb = b.scaled(ra / rb, len);
    let mut mix: Vec<f64> = sa
        .samples
        .iter()
        .zip(&sb.samples)
        .map(|(x, y)| x + y)
        .collect();
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > CLIP_LIMIT {
        let g = CLIP_LIMIT / peak;
        for v in sa.samples.iter_mut().chain(sb.samples.iter_mut()) {
            *v *= g;
        }
        mix = sa
            .samples
            .iter()
            .zip(&sb.samples)
            .map(|(x, y)| x + y)
            .collect();
    }
    Ok(MixturePair {
        mixture: Waveform::new(mix, a.sample_rate())?,
        source_a: sa,
        source_b: sb,
        pair_id: String::new(),
        sentence_id: String::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

/// One planned mixture: sentence `sentence_id` of speaker A over the
/// matching sentence of speaker B.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub pair_id: usize,
    pub sentence_id: usize,
    pub role: Role,
    pub source_a: PathBuf,
    pub source_b: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub corpus_root: PathBuf,
    pub seed: u64,
    pub entries: Vec<MixtureSpec>,
}

impl SplitManifest {
    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &MixtureSpec> {
        self.entries.iter().filter(move |e| e.role == role)
    }
}

/// Held-out sentences per speaker pair: one in five, at least one.
pub fn test_count(sentences_per_speaker: usize) -> usize {
    ((sentences_per_speaker as f64 * 0.2).round() as usize).max(1)
}

fn is_wav(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn list_speakers(root: &Path) -> Result<Vec<(PathBuf, Vec<PathBuf>)>, CorpusError> {
    let mut speakers = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| CorpusError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CorpusError::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let mut wavs: Vec<PathBuf> = fs::read_dir(&path)
            .map_err(|e| CorpusError::io(&path, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_wav(p))
            .collect();
        wavs.sort();
        speakers.push((path, wavs));
    }
    speakers.sort();
    Ok(speakers)
}

fn gender_hint(dir: &Path) -> Option<char> {
    let c = dir
        .file_name()?
        .to_str()?
        .chars()
        .next()?
        .to_ascii_lowercase();
    matches!(c, 'f' | 'm').then_some(c)
}

/// Plans `num_pairs` speaker pairs with `sentences_per_speaker` mixtures
/// each, split into train/test per pair. The corpus root holds one
/// subdirectory of WAV files per speaker. When directory names carry a
/// leading `m`/`f` (as in TIMIT) and both groups are large enough, pairs are
/// male-female; otherwise speakers are paired in seeded random order.
pub fn build_manifest(
    corpus_root: &Path,
    num_pairs: usize,
    sentences_per_speaker: usize,
    seed: u64,
) -> Result<SplitManifest, CorpusError> {
    if num_pairs == 0 || sentences_per_speaker < 2 {
        return Err(CorpusError::InsufficientCorpus(
            "need at least one pair and two sentences per speaker".into(),
        ));
    }
    let eligible: Vec<(PathBuf, Vec<PathBuf>)> = list_speakers(corpus_root)?
        .into_iter()
        .filter(|(_, w)| w.len() >= sentences_per_speaker)
        .collect();
    if eligible.len() < 2 * num_pairs {
        return Err(CorpusError::InsufficientCorpus(format!(
            "{} has {} speakers with at least {sentences_per_speaker} WAV files, need {}",
            corpus_root.display(),
            eligible.len(),
            2 * num_pairs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_hint = |g: char| -> Vec<usize> {
        (0..eligible.len())
            .filter(|&i| gender_hint(&eligible[i].0) == Some(g))
            .collect()
    };
    let (mut males, mut females) = (with_hint('m'), with_hint('f'));
    let pairs: Vec<(usize, usize)> = if females.len() >= num_pairs && males.len() >= num_pairs {
        males.shuffle(&mut rng);
        females.shuffle(&mut rng);
        males.into_iter().zip(females).take(num_pairs).collect()
    } else {
        let mut all: Vec<usize> = (0..eligible.len()).collect();
        all.shuffle(&mut rng);
        all.chunks_exact(2)
            .take(num_pairs)
            .map(|c| (c[0], c[1]))
            .collect()
    };
    let held_out = test_count(sentences_per_speaker);
    let mut entries = Vec::new();
    for (pair_id, (ia, ib)) in pairs.into_iter().enumerate() {
        let mut pick = |i: usize| {
            let mut w = eligible[i].1.clone();
            w.shuffle(&mut rng);
            w.truncate(sentences_per_speaker);
            w
        };
        let sa = pick(ia);
        let sb = pick(ib);
        for (sentence_id, (a, b)) in sa.into_iter().zip(sb).enumerate() {
            let role = if sentence_id < sentences_per_speaker - held_out {
                Role::Train
            } else {
                Role::Test
            };
            entries.push(MixtureSpec {
                pair_id,
                sentence_id,
                role,
                source_a: a,
                source_b: b,
            });
        }
    }
    Ok(SplitManifest {
        corpus_root: corpus_root.to_path_buf(),
        seed,
        entries,
    })
}

/// One line of a mixture manifest: `pair_id<TAB>role<TAB>path`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub role: Role,
    /// Mixture WAV; the scaled sources sit beside it (see [`source_paths`]).
    pub path: PathBuf,
}

const MIX_SUFFIX: &str = ".mix.wav";

/// File name stem used for a mixture and its sources.
pub fn mixture_stem(pair_id: usize, sentence_id: usize) -> PathBuf {
    PathBuf::from(format!("pair{pair_id:02}")).join(format!("s{sentence_id:02}"))
}

pub fn mixture_path(stem: &Path) -> PathBuf {
    PathBuf::from(format!("{}{MIX_SUFFIX}", stem.display()))
}

/// Paths of the scaled source A and B files belonging to a mixture file.
pub fn source_paths(mixture: &Path) -> (PathBuf, PathBuf) {
    let s = mixture.to_string_lossy();
    let stem = s.strip_suffix(MIX_SUFFIX).unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}.a.wav")),
        PathBuf::from(format!("{stem}.b.wav")),
    )
}

/// Writes entries with paths relative to the manifest's directory when possible.
pub fn write_manifest(
    path: &Path,
    entries: &[ManifestEntry],
    comment: &str,
) -> Result<(), CorpusError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for line in comment.lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            e.pair_id,
            e.role.name(),
            p.display()
        ));
    }
    fs::write(path, text).map_err(|e| CorpusError::io(path, e))
}

/// Reads a manifest; relative paths resolve against its directory. Lines
/// starting with `#` and blank lines are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| CorpusError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let role = match fields[1] {
            "train" => Role::Train,
            "test" => Role::Test,
            other => return Err(err(format!("unknown role `{other}`"))),
        };
        let p = Path::new(fields[2]);
        out.push(ManifestEntry {
            pair_id: fields[0].to_string(),
            role,
            path: if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            },
        });
    }
    Ok(out)
}

/// Loads a mixture and its two sources as written by the `mix` command.
pub fn load_mixture(entry: &ManifestEntry) -> Result<MixturePair, CorpusError> {
    let mixture = read_wav(&entry.path)?;
    let (pa, pb) = source_paths(&entry.path);
    let source_a = read_wav(&pa)?;
    let source_b = read_wav(&pb)?;
    for s in [&source_a, &source_b] {
        if s.sample_rate() != mixture.sample_rate() {
            return Err(CorpusError::RateMismatch(
                mixture.sample_rate(),
                s.sample_rate(),
            ));
        }
        if s.len() != mixture.len() {
            return Err(CorpusError::InvalidWaveform(format!(
                "{}: source length {} differs from mixture length {}",
                entry.path.display(),
                s.len(),
                mixture.len()
            )));
        }
    }
    let sentence_id = entry
        .path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(MIX_SUFFIX))
        .unwrap_or_default()
        .to_string();
    Ok(MixturePair {
        mixture,
        source_a,
        source_b,
        pair_id: entry.pair_id.clone(),
        sentence_id,
    })
}

/// A batch of equal-length segments, `[batch, segment_len]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mixtures: Tensor,
    pub sources: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.mixtures.shape()[0]
    }

    pub fn mixture(&self, i: usize) -> &[f64] {
        self.mixtures.row(i)
    }

    pub fn source(&self, i: usize) -> &[f64] {
        self.sources.row(i)
    }
}

/// Seeded random segments for one epoch. Every pair contributes
/// `ceil(len / segment_len)` segments (cycled to fill whole batches) at
/// uniform random offsets; sentences shorter than a segment are zero-padded.
/// `batches` overrides the number of batches per epoch.
pub fn batch_segments(
    pairs: &[MixturePair],
    target: TargetSource,
    segment_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    batches: Option<usize>,
) -> Result<std::vec::IntoIter<Batch>, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::Segments("no mixtures to segment".into()));
    }
    if segment_len == 0 || batch_size == 0 {
        return Err(CorpusError::Segments(
            "segment length and batch size must be positive".into(),
        ));
    }
    if pairs.iter().all(|p| p.mixture.len() < segment_len) {
        return Err(CorpusError::Segments(format!(
            "segment length {segment_len} exceeds every sentence"
        )));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut pool: Vec<usize> = pairs
        .iter()
        .enumerate()
        .flat_map(|(i, p)| std::iter::repeat_n(i, p.mixture.len().div_ceil(segment_len).max(1)))
        .collect();
    pool.shuffle(&mut rng);
    let n_batches = batches.unwrap_or_else(|| pool.len().div_ceil(batch_size));
    let mut out = Vec::with_capacity(n_batches);
    let mut cursor = 0;
    for _ in 0..n_batches {
        let mut mix = Vec::with_capacity(batch_size * segment_len);
        let mut src = Vec::with_capacity(batch_size * segment_len);
        for _ in 0..batch_size {
            let p = &pairs[pool[cursor % pool.len()]];
            cursor += 1;
            let len = p.mixture.len();
            let span = len.max(segment_len) - segment_len;
            let offset = if span == 0 {
                0
            } else {
                rng.gen_range(0..=span)
            };
            let take = |x: &[f64], dst: &mut Vec<f64>| {
                for t in offset..offset + segment_len {
                    dst.push(x.get(t).copied().unwrap_or(0.0));
                }
            };
            take(p.mixture.samples(), &mut mix);
            take(p.target(target).samples(), &mut src);
        }
        out.push(Batch {
            mixtures: Tensor::new(vec![batch_size, segment_len], mix).expect("batch shape"),
            sources: Tensor::new(vec![batch_size, segment_len], src).expect("batch shape"),
        });
    }
    Ok(out.into_iter())
}
