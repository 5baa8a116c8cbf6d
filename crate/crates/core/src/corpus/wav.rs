//! Minimal RIFF/WAVE reader and writer for PCM16 and IEEE float32.

use std::fs;
use std::path::Path;

use super::{CorpusError, Waveform};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

struct Fmt {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<Fmt, CorpusError> {
    if body.len() < 16 {
        return Err(CorpusError::Wav(format!(
            "`fmt ` chunk is {} bytes, need 16",
            body.len()
        )));
    }
    let mut format = u16_at(body, 0);
    if format == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(CorpusError::Wav(
                "extensible `fmt ` chunk is truncated".into(),
            ));
        }
        // First two bytes of the sub-format GUID carry the plain format tag.
        format = u16_at(body, 24);
    }
    Ok(Fmt {
        format,
        channels: u16_at(body, 2),
        sample_rate: u32_at(body, 4),
        bits: u16_at(body, 14),
    })
}

/// Decodes a WAV byte stream. Stereo and wider files are averaged to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, CorpusError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(CorpusError::Wav("missing RIFF/WAVE header".into()));
    }
    let mut fmt = None;
    let mut data = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.saturating_add(size);
        if body_end > bytes.len() {
            let name = String::from_utf8_lossy(id).into_owned();
            return Err(CorpusError::Wav(format!(
                "`{name}` chunk declares {size} bytes but only {} remain",
                bytes.len() - body_start
            )));
        }
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[body_start..body_end])?),
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| CorpusError::Wav("missing `fmt ` chunk".into()))?;
    let data = data.ok_or_else(|| CorpusError::Wav("missing `data` chunk".into()))?;
    if fmt.channels == 0 {
        return Err(CorpusError::Wav(
            "`fmt ` chunk declares zero channels".into(),
        ));
    }
    if fmt.sample_rate == 0 {
        return Err(CorpusError::Wav(
            "`fmt ` chunk declares a zero sample rate".into(),
        ));
    }
    let (width, decode): (usize, fn(&[u8]) -> f64) = match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) => (2, |b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0),
        (FORMAT_FLOAT, 32) => (4, |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        (f, b) => {
            return Err(CorpusError::Wav(format!(
                "unsupported codec: format tag {f} with {b} bits per sample"
            )))
        }
    };
    let channels = fmt.channels as usize;
    let frame = width * channels;
    let frames = data.len() / frame;
    if frames == 0 {
        return Err(CorpusError::Wav("`data` chunk holds no samples".into()));
    }
    let samples = (0..frames)
        .map(|i| {
            let f = &data[i * frame..(i + 1) * frame];
            let sum: f64 = f.chunks_exact(width).map(decode).sum();
            sum / channels as f64
        })
        .collect();
    Waveform::new(samples, fmt.sample_rate)
}

pub fn read_wav(path: &Path) -> Result<Waveform, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        CorpusError::Wav(msg) => CorpusError::Wav(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encodes a mono waveform. PCM16 rounds to the nearest step of 1/32768 and
/// saturates out-of-range samples.
pub fn encode_wav(wave: &Waveform, format: SampleFormat) -> Vec<u8> {
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block = bits / 8;
    let data_len = wave.len() as u32 * block as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate().to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate() * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in wave.samples() {
        match format {
            SampleFormat::Pcm16 => {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    out
}

pub fn write_wav(path: &Path, wave: &Waveform, format: SampleFormat) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        }
    }
    fs::write(path, encode_wav(wave, format)).map_err(|e| CorpusError::io(path, e))
}
