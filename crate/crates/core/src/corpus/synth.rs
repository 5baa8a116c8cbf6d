//! Seeded synthetic sources for smoke tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{mix_at_0db, CorpusError, MixturePair, Waveform};

/// White Gaussian noise restricted to `[low_hz, high_hz]` by zeroing FFT
/// bins outside the band, scaled to an RMS of 0.1.
pub fn band_limited_noise(
    len: usize,
    sample_rate: u32,
    low_hz: f64,
    high_hz: f64,
    seed: u64,
) -> Result<Waveform, CorpusError> {
    let nyquist = sample_rate as f64 / 2.0;
    if len == 0 || !(0.0 <= low_hz && low_hz < high_hz && high_hz <= nyquist) {
        return Err(CorpusError::InvalidWaveform(format!(
            "band [{low_hz}, {high_hz}] Hz of {len} samples at {sample_rate} Hz"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k);
        let hz = bin as f64 * sample_rate as f64 / len as f64;
        if hz < low_hz || hz > high_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut samples: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let r = super::rms(&samples);
    if r == 0.0 {
        return Err(CorpusError::Silent);
    }
    samples.iter_mut().for_each(|v| *v *= 0.1 / r);
    Waveform::new(samples, sample_rate)
}

/// The smoke-test task: one second at 8 kHz of 100-1000 Hz noise (source a)
/// against 1500-3000 Hz noise (source b), mixed at 0 dB.
pub fn smoke_mixture(seed: u64) -> Result<MixturePair, CorpusError> {
    let rate = 8000;
    let a = band_limited_noise(rate as usize, rate, 100.0, 1000.0, seed)?;
    let b = band_limited_noise(rate as usize, rate, 1500.0, 3000.0, seed.wrapping_add(1))?;
    let mut pair = mix_at_0db(&a, &b)?;
    pair.pair_id = "smoke".into();
    pair.sentence_id = "s00".into();
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_stays_in_band() {
        let w = band_limited_noise(4000, 8000, 500.0, 1000.0, 3).unwrap();
        let mut buf: Vec<Complex<f64>> =
            w.samples().iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(4000).process(&mut buf);
        let (mut inside, mut outside) = (0.0, 0.0);
        for (k, c) in buf.iter().enumerate().take(2001) {
            let hz = k as f64 * 2.0;
            if (500.0..=1000.0).contains(&hz) {
                inside += c.norm_sqr();
            } else {
                outside += c.norm_sqr();
            }
        }
        assert!(outside < 1e-20 * inside);
        assert!((super::super::rms(w.samples()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn smoke_mixture_is_seeded() {
        let a = smoke_mixture(5).unwrap();
        assert_eq!(a, smoke_mixture(5).unwrap());
        assert_ne!(a.mixture, smoke_mixture(6).unwrap().mixture);
        assert_eq!(a.mixture.len(), 8000);
    }
}
