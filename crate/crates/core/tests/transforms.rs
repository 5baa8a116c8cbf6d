//! Fixed transforms and the demodulation identity against direct formulas.

mod common;

use aetsep::frontends::{
    dct2_basis, istft, moving_average, short_time_transform, smooth_demodulate, stft, Stft, Window,
};
use common::{rng, suites};
use rand::Rng;

#[test]
fn short_time_transform_matches_direct_sum() {
    let worst = suites::short_time_worst();
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn dct2_rows_are_orthonormal() {
    let worst = suites::dct_orthonormality_worst();
    assert!(worst < 1e-10, "{worst:e}");
}

#[test]
fn stft_round_trip_hann_1024_16() {
    let worst = suites::stft_round_trip_worst();
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn stft_round_trip_other_geometries() {
    let mut r = rng(21);
    for (len, n, hop) in [(3000, 256, 64), (777, 64, 16), (500, 32, 8), (400, 16, 4)] {
        let x: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w = Window::hann(n);
        let spec = stft(&x, n, hop, &w).unwrap();
        let y = istft(&spec, &w, Some(len)).unwrap();
        assert_eq!(y.len(), len);
        let worst = (n..len - n)
            .map(|t| (x[t] - y[t]).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{len}/{n}/{hop}: {worst:e}");
    }
}

#[test]
fn istft_is_linear() {
    let mut r = rng(22);
    let (n, hop, frames) = (32, 8, 9);
    let bins = n / 2 + 1;
    let mut planes = || -> Stft {
        let re: Vec<f64> = (0..frames * bins).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut im: Vec<f64> = (0..frames * bins).map(|_| r.gen_range(-1.0..1.0)).collect();
        for f in 0..frames {
            im[f * bins] = 0.0;
            im[f * bins + bins - 1] = 0.0;
        }
        Stft {
            n_fft: n,
            hop,
            frames,
            bins,
            re,
            im,
        }
    };
    let a = planes();
    let b = planes();
    let sum = Stft {
        re: a.re.iter().zip(&b.re).map(|(x, y)| x + y).collect(),
        im: a.im.iter().zip(&b.im).map(|(x, y)| x + y).collect(),
        ..a.clone()
    };
    let w = Window::hann(n);
    let (ya, yb, ys) = (
        istft(&a, &w, None).unwrap(),
        istft(&b, &w, None).unwrap(),
        istft(&sum, &w, None).unwrap(),
    );
    for t in 0..ys.len() {
        assert!((ys[t] - ya[t] - yb[t]).abs() < 1e-10);
    }
}

#[test]
fn fixed_demodulation_identity() {
    let mut r = rng(23);
    let x: Vec<f64> = (0..400).map(|_| r.gen_range(-1.0..1.0)).collect();
    let c = short_time_transform(&x, &dct2_basis(32, 32).unwrap(), &Window::hann(32), 4).unwrap();
    let mp = smooth_demodulate(&c, &[moving_average(5)], 1e-8).unwrap();
    for i in 0..c.data.len() {
        if mp.magnitude[i] > 1e-8 {
            assert!((mp.magnitude[i] * mp.phase[i] - c.data[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn learned_demodulation_identity() {
    let (worst, checked) = suites::demodulation_worst();
    assert!(checked > 1000);
    assert!(worst < 1e-12, "{worst:e}");
}
