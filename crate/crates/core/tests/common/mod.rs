//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

pub mod suites;

use aetsep::autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Norm-wise relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Builds a graph from parameter leaves with `build`, reduces the output to
/// a scalar through fixed random weights, and compares the backward pass
/// against central differences for every input. Returns the worst
/// per-input relative error.
pub fn gradient_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let mut r = rng(0xF00D);
        random_tensor(&mut r, g.value(out).shape(), 1.0)
    };
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let w = g.constant(weights.clone());
    let root = g.dot(out, w).unwrap();
    let grads = g.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        let numeric = numeric_gradient(inputs[i].data(), |x| {
            let mut ts = inputs.to_vec();
            ts[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
            eval(&ts)
        });
        assert!(
            numeric.iter().any(|&d| d != 0.0),
            "input {i} has an all-zero gradient"
        );
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Direct evaluation of the short-time transform sum
/// `X[k, n] = sum_t x[n*hop + t] w[t] b[k, t]`, zero beyond the signal end.
pub fn brute_short_time(
    x: &[f64],
    basis: &[Vec<f64>],
    window: &[f64],
    hop: usize,
    frames: usize,
) -> Vec<Vec<f64>> {
    basis
        .iter()
        .map(|b| {
            (0..frames)
                .map(|n| {
                    let mut acc = 0.0;
                    for t in 0..window.len() {
                        let s = x.get(n * hop + t).copied().unwrap_or(0.0);
                        acc += s * window[t] * b[t];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II matrix written out from its definition.
pub fn brute_dct2(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let c = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|t| c * (std::f64::consts::PI * (t as f64 + 0.5) * k as f64 / n as f64).cos())
                .collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SDR, SIR, SAR for one-tap projections onto two references, from the
/// 2x2 normal equations solved by Cramer's rule.
pub fn two_source_projection_scores(est: &[f64], target: &[f64], other: &[f64]) -> (f64, f64, f64) {
    let s_target: Vec<f64> = {
        let c = dot(est, target) / dot(target, target);
        target.iter().map(|v| c * v).collect()
    };
    let (aa, bb, ab) = (dot(target, target), dot(other, other), dot(target, other));
    let (ea, eb) = (dot(est, target), dot(est, other));
    let det = aa * bb - ab * ab;
    let ca = (ea * bb - eb * ab) / det;
    let cb = (aa * eb - ab * ea) / det;
    let p_all: Vec<f64> = target
        .iter()
        .zip(other)
        .map(|(a, b)| ca * a + cb * b)
        .collect();
    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = est.iter().zip(&p_all).map(|(e, p)| e - p).collect();
    let energy = |v: &[f64]| dot(v, v);
    let db = |num: f64, den: f64| 10.0 * (num / den).log10();
    let distortion: Vec<f64> = e_interf.iter().zip(&e_artif).map(|(i, a)| i + a).collect();
    let signal: Vec<f64> = s_target.iter().zip(&e_interf).map(|(s, i)| s + i).collect();
    (
        db(energy(&s_target), energy(&distortion)),
        db(energy(&s_target), energy(&e_interf)),
        db(energy(&signal), energy(&e_artif)),
    )
}

/// Sort-based median, independent of the CLI's quantile helper.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
