//! Auto-encoder transform: a learnable analysis filterbank with smoothing
//! and pooling, and the matching filterbank-summation decoder.
//!
//! Analysis: `X = conv(x, F)` at unit hop, `M = softplus(|X| * s + bias)`,
//! `P = X / M`, then max-pooling of `M` over `pool` frames. Synthesis
//! zero-inserts the (possibly modified) pooled magnitudes back to full
//! rate, multiplies by `P`, and adds each filter shifted to every frame it
//! weights. The orthogonal variant reuses `F` for synthesis, so the inverse
//! is the transpose of the forward transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Padding, Tensor, UnpoolPlacement, Var};

/// Denominator clamp for `P = X / M`.
pub const PHASE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AetError {
    #[error("invalid AET configuration: {0}")]
    Config(String),
    #[error("signal of {len} samples is shorter than one {width}-sample filter")]
    SignalTooShort { len: usize, width: usize },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AetConfig {
    pub num_filters: usize,
    pub filter_width: usize,
    pub pool: usize,
    pub smoothing_length: usize,
    /// Synthesis reuses the analysis filters (orthogonal AET).
    #[serde(default)]
    pub tied: bool,
    #[serde(default, with = "placement_serde")]
    pub placement: UnpoolPlacement,
}

pub(crate) mod placement_serde {
    use super::UnpoolPlacement;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &UnpoolPlacement, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(super::placement_name(*p))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<UnpoolPlacement, D::Error> {
        let name = String::deserialize(d)?;
        super::parse_placement(&name).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "unknown placement `{name}` (expected window_start or recorded_indices)"
            ))
        })
    }
}

pub fn placement_name(p: UnpoolPlacement) -> &'static str {
    match p {
        UnpoolPlacement::WindowStart => "window_start",
        UnpoolPlacement::RecordedIndices => "recorded_indices",
    }
}

pub fn parse_placement(name: &str) -> Option<UnpoolPlacement> {
    match name {
        "window_start" => Some(UnpoolPlacement::WindowStart),
        "recorded_indices" => Some(UnpoolPlacement::RecordedIndices),
        _ => None,
    }
}

impl Default for AetConfig {
    fn default() -> Self {
        Self {
            num_filters: 1024,
            filter_width: 1024,
            pool: 16,
            smoothing_length: 5,
            tied: false,
            placement: UnpoolPlacement::WindowStart,
        }
    }
}

impl AetConfig {
    pub fn validate(&self) -> Result<(), AetError> {
        if self.num_filters < 1 {
            return Err(AetError::Config("num_filters must be at least 1".into()));
        }
        if self.filter_width < 2 {
            return Err(AetError::Config("filter_width must be at least 2".into()));
        }
        if self.pool < 1 {
            return Err(AetError::Config("pool must be at least 1".into()));
        }
        if self.smoothing_length < 1 {
            return Err(AetError::Config(
                "smoothing_length must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn pooled_frames(&self, len: usize) -> usize {
        len.div_ceil(self.pool)
    }
}

/// Trainable tensors of one AET.
#[derive(Clone, Debug, PartialEq)]
pub struct AetParams {
    /// `F`, `[K, W]`.
    pub analysis: Tensor,
    /// Depthwise smoothing filters `s`, `[K, L]`.
    pub smoothing: Tensor,
    /// `[K]`.
    pub smoothing_bias: Tensor,
    /// `G`, `[K, W]`; `None` for the tied variant.
    pub synthesis: Option<Tensor>,
}

impl AetParams {
    /// Deterministic initialization: filters uniform in `±sqrt(1/W)`,
    /// smoothing uniform in `[0, 2/L]`, zero bias.
    pub fn init(config: &AetConfig, seed: u64) -> Result<Self, AetError> {
        config.validate()?;
        let (k, w, l) = (
            config.num_filters,
            config.filter_width,
            config.smoothing_length,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / w as f64).sqrt();
        let mut uniform = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(lo..hi)).collect()
        };
        let analysis = Tensor::new(vec![k, w], uniform(k * w, -bound, bound))?;
        let smoothing = Tensor::new(vec![k, l], uniform(k * l, 0.0, 2.0 / l as f64))?;
        let synthesis = if config.tied {
            None
        } else {
            Some(Tensor::new(vec![k, w], uniform(k * w, -bound, bound))?)
        };
        Ok(Self {
            analysis,
            smoothing,
            smoothing_bias: Tensor::zeros(&[k]),
            synthesis,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.analysis.len()
            + self.smoothing.len()
            + self.smoothing_bias.len()
            + self.synthesis.as_ref().map_or(0, Tensor::len)
    }

    pub fn num_filters(&self) -> usize {
        self.analysis.shape()[0]
    }

    pub fn filter_width(&self) -> usize {
        self.analysis.shape()[1]
    }

    /// Checks tensor shapes against a configuration.
    pub fn check(&self, config: &AetConfig) -> Result<(), AetError> {
        let (k, w, l) = (
            config.num_filters,
            config.filter_width,
            config.smoothing_length,
        );
        let bad = |name: &str, got: &[usize]| {
            Err(AetError::Geometry(format!(
                "{name} has shape {got:?} for K={k}, W={w}, L={l}"
            )))
        };
        if self.analysis.shape() != [k, w] {
            return bad("analysis", self.analysis.shape());
        }
        if self.smoothing.shape() != [k, l] {
            return bad("smoothing", self.smoothing.shape());
        }
        if self.smoothing_bias.shape() != [k] {
            return bad("smoothing_bias", self.smoothing_bias.shape());
        }
        match (&self.synthesis, config.tied) {
            (None, true) => Ok(()),
            (Some(g), false) if g.shape() == [k, w] => Ok(()),
            (Some(g), false) => bad("synthesis", g.shape()),
            (Some(_), true) => Err(AetError::Geometry(
                "tied AET stores no synthesis filters".into(),
            )),
            (None, false) => Err(AetError::Geometry(
                "untied AET needs synthesis filters".into(),
            )),
        }
    }

    /// Places the parameters on a graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AetVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        AetVars {
            analysis: leaf(&self.analysis),
            smoothing: leaf(&self.smoothing),
            smoothing_bias: leaf(&self.smoothing_bias),
            synthesis: self.synthesis.as_ref().map(&mut leaf),
        }
    }
}

/// Graph handles for [`AetParams`].
#[derive(Clone, Copy, Debug)]
pub struct AetVars {
    pub analysis: Var,
    pub smoothing: Var,
    pub smoothing_bias: Var,
    pub synthesis: Option<Var>,
}

/// Graph nodes produced by [`encode`].
#[derive(Clone, Debug)]
pub struct EncodedSignal {
    /// `X`, `[K, T]` unit-hop coefficients.
    pub coeffs: Var,
    /// Smoothed magnitude `M`, `[K, T]`, strictly positive.
    pub magnitude: Var,
    /// Carrier `P = X / M`, `[K, T]`.
    pub phase: Var,
    /// Max-pooled magnitude, `[K, ceil(T/h)]`.
    pub pooled: Var,
    pub pool_indices: Vec<usize>,
    pub len: usize,
}

/// Analysis encoder. `signal` is a `[1, T]` node.
pub fn encode(
    g: &mut Graph,
    signal: Var,
    vars: &AetVars,
    config: &AetConfig,
) -> Result<EncodedSignal, AetError> {
    let shape = g.value(signal).shape().to_vec();
    let len = match shape.as_slice() {
        [1, t] => *t,
        s => {
            return Err(AetError::Geometry(format!(
                "signal must be [1, T], got {s:?}"
            )))
        }
    };
    if len < config.filter_width {
        return Err(AetError::SignalTooShort {
            len,
            width: config.filter_width,
        });
    }
    let (k, w) = (config.num_filters, config.filter_width);
    let filters = g.reshape(vars.analysis, &[k, 1, w])?;
    let coeffs = g.conv1d(signal, filters, 1, Padding::Same)?;
    let rectified = g.abs(coeffs);
    let smoothed = g.depthwise_conv1d(rectified, vars.smoothing, 1, Padding::Same)?;
    let biased = g.channel_bias(smoothed, vars.smoothing_bias)?;
    let magnitude = g.softplus(biased);
    let phase = g.div(coeffs, magnitude, PHASE_EPS)?;
    let pooled = g.maxpool1d(magnitude, config.pool)?;
    Ok(EncodedSignal {
        coeffs,
        magnitude,
        phase,
        pooled: pooled.values,
        pool_indices: pooled.indices,
        len,
    })
}

/// Synthesis decoder: unpool `magnitude_pooled` (`[K, ceil(T/h)]`), multiply
/// by the encoded carrier and sum shifted synthesis filters. Returns a
/// `[1, T]` node, normalized by the `W` contributions each sample receives.
pub fn decode(
    g: &mut Graph,
    magnitude_pooled: Var,
    encoded: &EncodedSignal,
    vars: &AetVars,
    config: &AetConfig,
) -> Result<Var, AetError> {
    let (k, w) = (config.num_filters, config.filter_width);
    let expected = [k, config.pooled_frames(encoded.len)];
    if g.value(magnitude_pooled).shape() != expected {
        return Err(AetError::Geometry(format!(
            "pooled magnitude {:?}, encoder produced {expected:?}",
            g.value(magnitude_pooled).shape()
        )));
    }
    let unpooled = g.unpool(
        magnitude_pooled,
        config.pool,
        encoded.len,
        config.placement,
        Some(&encoded.pool_indices),
    )?;
    let approx = g.mul(unpooled, encoded.phase)?;
    let synthesis = match (vars.synthesis, config.tied) {
        (_, true) => vars.analysis,
        (Some(s), false) => s,
        (None, false) => {
            return Err(AetError::Geometry(
                "untied AET needs synthesis filters".into(),
            ));
        }
    };
    let filters = g.reshape(synthesis, &[k, 1, w])?;
    let (pad_left, _) = Padding::Same.amounts(w);
    let summed = g.conv_transpose1d(approx, filters, 1, pad_left, encoded.len)?;
    Ok(g.scale(summed, 1.0 / w as f64))
}

/// Encode then decode the unmodified pooled magnitude, outside any training graph.
pub fn reconstruct(
    params: &AetParams,
    config: &AetConfig,
    x: &[f64],
) -> Result<Vec<f64>, AetError> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let signal = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let enc = encode(&mut g, signal, &vars, config)?;
    let y = decode(&mut g, enc.pooled, &enc, &vars, config)?;
    Ok(g.value(y).data().to_vec())
}

/// One analysis filter with its normalized magnitude spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisView {
    pub index: usize,
    pub filter: Vec<f64>,
    /// `fft_size / 2 + 1` bins, peak-normalized to 1 (all zeros for a zero filter).
    pub spectrum: Vec<f64>,
    pub dominant_bin: usize,
}

/// Zero-padded magnitude spectrum of each analysis filter, sorted by the
/// bin of its spectral peak (ties by filter index).
pub fn inspect_bases(analysis: &Tensor, fft_size: usize) -> Vec<BasisView> {
    let (k, w) = (analysis.shape()[0], analysis.shape()[1]);
    let n = fft_size.max(w).max(2);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut views: Vec<BasisView> = (0..k)
        .map(|i| {
            let filter = analysis.row(i).to_vec();
            let mut buf = vec![Complex::new(0.0, 0.0); n];
            for (b, v) in buf.iter_mut().zip(&filter) {
                b.re = *v;
            }
            fft.process(&mut buf);
            let mut spectrum: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm()).collect();
            let (dominant_bin, peak) = spectrum.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (b, v)| if v > best.1 { (b, v) } else { best },
            );
            if peak > 0.0 {
                for v in &mut spectrum {
                    *v /= peak;
                }
            }
            BasisView {
                index: i,
                filter,
                spectrum,
                dominant_bin,
            }
        })
        .collect();
    views.sort_by_key(|v| (v.dominant_bin, v.index));
    views
}

/// Wiener entropy of a magnitude spectrum: geometric over arithmetic mean
/// of the power. 1 for a flat spectrum, near 0 for a peaky one.
pub fn spectral_flatness(magnitude: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-20;
    if magnitude.is_empty() {
        return 0.0;
    }
    let n = magnitude.len() as f64;
    let power: Vec<f64> = magnitude.iter().map(|m| m * m + FLOOR).collect();
    let log_mean = power.iter().map(|p| p.ln()).sum::<f64>() / n;
    let mean = power.iter().sum::<f64>() / n;
    log_mean.exp() / mean
}
