//! Fixed short-time transforms: a generic windowed basis transform (used
//! with the orthonormal DCT-II), a real-input STFT with its overlap-add
//! inverse, and the smoothing/demodulation split of real coefficients into a
//! positive envelope and a carrier.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::autodiff::{LinearOp, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("empty signal")]
    EmptySignal,
    #[error("signal of {len} samples is shorter than one {frame}-sample frame")]
    TooShort { len: usize, frame: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Rectangular,
}

/// Analysis/synthesis window `w(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    kind: WindowKind,
    values: Vec<f64>,
}

impl Window {
    /// Periodic Hann window; overlap-adds to a constant for any hop dividing `len / 2`.
    pub fn hann(len: usize) -> Self {
        let values = (0..len)
            .map(|t| 0.5 - 0.5 * (2.0 * PI * t as f64 / len as f64).cos())
            .collect();
        Self {
            kind: WindowKind::Hann,
            values,
        }
    }

    pub fn rectangular(len: usize) -> Self {
        Self {
            kind: WindowKind::Rectangular,
            values: vec![1.0; len],
        }
    }

    pub fn new(kind: WindowKind, len: usize) -> Self {
        match kind {
            WindowKind::Hann => Self::hann(len),
            WindowKind::Rectangular => Self::rectangular(len),
        }
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    Dct2,
    DftRealPair,
}

/// `K x N` matrix of basis functions `b(k, t)`, one function per row.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix {
    kind: BasisKind,
    components: usize,
    len: usize,
    data: Vec<f64>,
}

impl BasisMatrix {
    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.len..(k + 1) * self.len]
    }

    pub fn at(&self, k: usize, t: usize) -> f64 {
        self.data[k * self.len + t]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Orthonormal DCT-II basis: `b(k,t) = c_k cos(pi k (2t+1) / 2N)` with
/// `c_0 = sqrt(1/N)` and `c_k = sqrt(2/N)` otherwise.
pub fn dct2_basis(len: usize, components: usize) -> Result<BasisMatrix, FrontendError> {
    if components == 0 || len == 0 || components > len {
        return Err(FrontendError::Geometry(format!(
            "DCT-II needs 1 <= K <= N, got K={components}, N={len}"
        )));
    }
    let n = len as f64;
    let mut data = Vec::with_capacity(components * len);
    for k in 0..components {
        let c = if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        for t in 0..len {
            data.push(c * (PI * k as f64 * (2 * t + 1) as f64 / (2.0 * n)).cos());
        }
    }
    Ok(BasisMatrix {
        kind: BasisKind::Dct2,
        components,
        len,
        data,
    })
}

/// Real coefficients of a short-time transform, `K` components by `T` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffMatrix {
    pub components: usize,
    pub frames: usize,
    pub hop: usize,
    /// Row-major `[component][frame]`.
    pub data: Vec<f64>,
}

impl CoeffMatrix {
    pub fn at(&self, k: usize, n: usize) -> f64 {
        self.data[k * self.frames + n]
    }

    pub fn component(&self, k: usize) -> &[f64] {
        &self.data[k * self.frames..(k + 1) * self.frames]
    }
}

/// Number of frames covering `len` samples with the last frame zero-padded.
pub fn frame_count(len: usize, frame: usize, hop: usize) -> usize {
    if len <= frame {
        1
    } else {
        (len - frame).div_ceil(hop) + 1
    }
}

/// `X[k][n] = sum_t x(n*hop + t) w(t) b(k,t)`, the signal end zero-padded to
/// complete the final frame.
pub fn short_time_transform(
    x: &[f64],
    basis: &BasisMatrix,
    window: &Window,
    hop: usize,
) -> Result<CoeffMatrix, FrontendError> {
    if x.is_empty() {
        return Err(FrontendError::EmptySignal);
    }
    let n = basis.len();
    if window.len() != n {
        return Err(FrontendError::Geometry(format!(
            "window length {} differs from basis length {n}",
            window.len()
        )));
    }
    if hop == 0 {
        return Err(FrontendError::Geometry("hop must be positive".into()));
    }
    if x.len() < n {
        return Err(FrontendError::TooShort {
            len: x.len(),
            frame: n,
        });
    }
    let frames = frame_count(x.len(), n, hop);
    let k_count = basis.components();
    let mut data = vec![0.0; k_count * frames];
    let mut seg = vec![0.0; n];
    for f in 0..frames {
        let start = f * hop;
        for (t, s) in seg.iter_mut().enumerate() {
            *s = x.get(start + t).copied().unwrap_or(0.0) * window.values()[t];
        }
        for k in 0..k_count {
            data[k * frames + f] = basis.row(k).iter().zip(&seg).map(|(b, s)| b * s).sum();
        }
    }
    Ok(CoeffMatrix {
        components: k_count,
        frames,
        hop,
        data,
    })
}

/// Complex STFT stored as real/imaginary planes, `frames x bins` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Stft {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect()
    }

    /// Unit-modulus phase pair; bins with zero magnitude get phase `(1, 0)`.
    pub fn phase(&self) -> (Vec<f64>, Vec<f64>) {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| {
                let m = (r * r + i * i).sqrt();
                if m > 0.0 {
                    (r / m, i / m)
                } else {
                    (1.0, 0.0)
                }
            })
            .unzip()
    }
}

fn check_stft_geometry(n_fft: usize, hop: usize, window: &Window) -> Result<(), FrontendError> {
    if n_fft == 0 || !n_fft.is_multiple_of(2) {
        return Err(FrontendError::Geometry(format!(
            "FFT size {n_fft} must be even"
        )));
    }
    if hop == 0 {
        return Err(FrontendError::Geometry("hop must be positive".into()));
    }
    if window.len() != n_fft {
        return Err(FrontendError::Geometry(format!(
            "window length {} differs from FFT size {n_fft}",
            window.len()
        )));
    }
    Ok(())
}

/// Real-input short-time Fourier transform with `n_fft / 2 + 1` bins.
/// Frames start at multiples of `hop` with no centering; the end is
/// zero-padded to complete the last frame.
pub fn stft(x: &[f64], n_fft: usize, hop: usize, window: &Window) -> Result<Stft, FrontendError> {
    check_stft_geometry(n_fft, hop, window)?;
    if x.is_empty() {
        return Err(FrontendError::EmptySignal);
    }
    let frames = frame_count(x.len(), n_fft, hop);
    let bins = n_fft / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut re = vec![0.0; frames * bins];
    let mut im = vec![0.0; frames * bins];
    for f in 0..frames {
        let start = f * hop;
        for (t, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(
                x.get(start + t).copied().unwrap_or(0.0) * window.values()[t],
                0.0,
            );
        }
        fft.process(&mut buf);
        for k in 0..bins {
            re[f * bins + k] = buf[k].re;
            im[f * bins + k] = buf[k].im;
        }
    }
    Ok(Stft {
        n_fft,
        hop,
        frames,
        bins,
        re,
        im,
    })
}

/// Overlap-add synthesis geometry shared by [`istft`] and [`IstftMap`].
struct OverlapAdd {
    n_fft: usize,
    hop: usize,
    frames: usize,
    window: Vec<f64>,
    /// `1 / sum_n w^2(t - n*hop)`, zero where the sum vanishes.
    inv_norm: Vec<f64>,
    inverse: Arc<dyn Fft<f64>>,
    forward: Arc<dyn Fft<f64>>,
}

impl OverlapAdd {
    fn new(n_fft: usize, hop: usize, frames: usize, window: &Window) -> Self {
        let full = (frames.max(1) - 1) * hop + n_fft;
        let mut norm = vec![0.0; full];
        for f in 0..frames {
            for (t, w) in window.values().iter().enumerate() {
                norm[f * hop + t] += w * w;
            }
        }
        let inv_norm = norm
            .into_iter()
            .map(|v| if v > 1e-10 { 1.0 / v } else { 0.0 })
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            frames,
            window: window.values().to_vec(),
            inv_norm,
            inverse: planner.plan_fft_inverse(n_fft),
            forward: planner.plan_fft_forward(n_fft),
        }
    }

    fn full_len(&self) -> usize {
        self.inv_norm.len()
    }

    fn synthesize(&self, re: &[f64], im: &[f64], out_len: usize) -> Vec<f64> {
        let n = self.n_fft;
        let bins = n / 2 + 1;
        let mut y = vec![0.0; self.full_len().max(out_len)];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for f in 0..self.frames {
            for k in 0..bins {
                buf[k] = Complex::new(re[f * bins + k], im[f * bins + k]);
            }
            for k in 1..n / 2 {
                buf[n - k] = buf[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for t in 0..n {
                y[start + t] += self.window[t] * buf[t].re / n as f64;
            }
        }
        for (v, s) in y.iter_mut().zip(&self.inv_norm) {
            *v *= s;
        }
        y.truncate(out_len);
        y
    }

    /// Transpose of `synthesize`: waveform gradient to (re, im) gradients.
    fn analyze_adjoint(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_fft;
        let bins = n / 2 + 1;
        let mut gre = vec![0.0; self.frames * bins];
        let mut gim = vec![0.0; self.frames * bins];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for f in 0..self.frames {
            let start = f * self.hop;
            for (t, c) in buf.iter_mut().enumerate() {
                let gv = g.get(start + t).copied().unwrap_or(0.0);
                *c = Complex::new(gv * self.inv_norm[start + t] * self.window[t], 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
                gre[f * bins + k] = weight * buf[k].re;
                gim[f * bins + k] = if k == 0 || k == n / 2 {
                    0.0
                } else {
                    weight * buf[k].im
                };
            }
        }
        (gre, gim)
    }
}

/// Weighted overlap-add inverse of [`stft`]; returns `out_len` samples, or
/// the natural `(frames - 1) * hop + n_fft` when `out_len` is `None`.
pub fn istft(
    spec: &Stft,
    window: &Window,
    out_len: Option<usize>,
) -> Result<Vec<f64>, FrontendError> {
    check_stft_geometry(spec.n_fft, spec.hop, window)?;
    if spec.bins != spec.n_fft / 2 + 1
        || spec.re.len() != spec.frames * spec.bins
        || spec.im.len() != spec.re.len()
    {
        return Err(FrontendError::Geometry(
            "coefficient planes do not match the declared frame/bin counts".into(),
        ));
    }
    let ola = OverlapAdd::new(spec.n_fft, spec.hop, spec.frames, window);
    let len = out_len.unwrap_or(ola.full_len());
    Ok(ola.synthesize(&spec.re, &spec.im, len))
}

/// Inverse STFT of a magnitude spectrogram under a fixed phase, as a linear
/// graph operation. Input `[frames, bins]` magnitudes, output `[1, out_len]`.
pub struct IstftMap {
    ola: OverlapAdd,
    phase_re: Vec<f64>,
    phase_im: Vec<f64>,
    out_len: usize,
}

impl IstftMap {
    pub fn new(phase_of: &Stft, window: &Window, out_len: usize) -> Result<Self, FrontendError> {
        check_stft_geometry(phase_of.n_fft, phase_of.hop, window)?;
        let (phase_re, phase_im) = phase_of.phase();
        Ok(Self {
            ola: OverlapAdd::new(phase_of.n_fft, phase_of.hop, phase_of.frames, window),
            phase_re,
            phase_im,
            out_len,
        })
    }
}

impl LinearOp for IstftMap {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn apply(&self, input: &Tensor) -> Tensor {
        let m = input.data();
        let re: Vec<f64> = m.iter().zip(&self.phase_re).map(|(a, p)| a * p).collect();
        let im: Vec<f64> = m.iter().zip(&self.phase_im).map(|(a, p)| a * p).collect();
        let y = self.ola.synthesize(&re, &im, self.out_len);
        Tensor::vector(y)
            .reshaped(&[1, self.out_len])
            .expect("length matches")
    }

    fn adjoint(&self, grad: &Tensor) -> Tensor {
        let (gre, gim) = self.ola.analyze_adjoint(grad.data());
        let gm: Vec<f64> = gre
            .iter()
            .zip(&gim)
            .zip(self.phase_re.iter().zip(&self.phase_im))
            .map(|((gr, gi), (pr, pi))| gr * pr + gi * pi)
            .collect();
        let bins = self.ola.n_fft / 2 + 1;
        Tensor::new(vec![self.ola.frames, bins], gm).expect("frame geometry")
    }
}

/// Envelope `M` and carrier `P` of real coefficients, with `M * P = X`.
#[derive(Clone, Debug, PartialEq)]
pub struct MagPhase {
    pub components: usize,
    pub frames: usize,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

/// Length-`len` moving average, the default fixed smoother.
pub fn moving_average(len: usize) -> Vec<f64> {
    vec![1.0 / len as f64; len]
}

/// `M = |X| * s` per component along time (same padding) and
/// `P = X / max(M, eps)`. `smoothers` holds one filter per component, or a
/// single filter shared by all.
pub fn smooth_demodulate(
    x: &CoeffMatrix,
    smoothers: &[Vec<f64>],
    eps: f64,
) -> Result<MagPhase, FrontendError> {
    let (k_count, frames) = (x.components, x.frames);
    if smoothers.is_empty() || (smoothers.len() != 1 && smoothers.len() != k_count) {
        return Err(FrontendError::Geometry(format!(
            "{} smoothing filters for {k_count} components",
            smoothers.len()
        )));
    }
    let mut magnitude = vec![0.0; k_count * frames];
    let mut phase = vec![0.0; k_count * frames];
    for k in 0..k_count {
        let s = &smoothers[if smoothers.len() == 1 { 0 } else { k }];
        let l = s.len();
        if l == 0 || l > frames {
            return Err(FrontendError::Geometry(format!(
                "smoothing length {l} must be in 1..={frames}"
            )));
        }
        let left = (l - 1) / 2;
        let row = x.component(k);
        for n in 0..frames {
            let mut acc = 0.0;
            for (t, w) in s.iter().enumerate() {
                let idx = n + t;
                if idx >= left && idx - left < frames {
                    acc += w * row[idx - left].abs();
                }
            }
            magnitude[k * frames + n] = acc;
            phase[k * frames + n] = row[n] / acc.max(eps);
        }
    }
    Ok(MagPhase {
        components: k_count,
        frames,
        magnitude,
        phase,
    })
}
