//! Measurements shared by the unit-style integration tests and the
//! acceptance run. Each returns the observed error (or value) so callers
//! pick the threshold.

use std::sync::Arc;

use aetsep::aet::{self, AetConfig, AetParams, PHASE_EPS};
use aetsep::autodiff::{Graph, Padding, Tensor, UnpoolPlacement, Var};
use aetsep::frontends::{
    dct2_basis, frame_count, istft, short_time_transform, stft, IstftMap, Window,
};
use aetsep::metrics::{self, bss_eval, sdr_db, sdr_loss_value, BssScores, LossKind};
use aetsep::separator::{
    build_model, FrontendKind, Mode, ModelConfig, SeparationModel, SeparatorConfig, StftGeometry,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Cases = Vec<(String, f64)>;

fn case(
    out: &mut Cases,
    name: impl Into<String>,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    out.push((name.into(), gradient_check(inputs, build)));
}

pub fn conv_cases() -> Cases {
    let mut r = rng(1);
    let mut out = Vec::new();
    for (stride, padding) in [
        (1, Padding::Valid),
        (1, Padding::Same),
        (2, Padding::Valid),
        (3, Padding::Same),
    ] {
        let x = random_tensor(&mut r, &[2, 13], 1.0);
        let f = random_tensor(&mut r, &[3, 2, 4], 1.0);
        case(
            &mut out,
            format!("conv1d stride {stride} {padding:?}"),
            &[x, f],
            |g, v| g.conv1d(v[0], v[1], stride, padding).unwrap(),
        );
    }
    for (stride, pad_left, out_len) in [(1, 0, 12), (1, 2, 9), (2, 1, 20), (3, 0, 17)] {
        let x = random_tensor(&mut r, &[3, 6], 1.0);
        let f = random_tensor(&mut r, &[3, 2, 5], 1.0);
        case(
            &mut out,
            format!("conv_transpose1d stride {stride} pad {pad_left}"),
            &[x, f],
            |g, v| {
                g.conv_transpose1d(v[0], v[1], stride, pad_left, out_len)
                    .unwrap()
            },
        );
    }
    for padding in [Padding::Valid, Padding::Same] {
        let x = random_tensor(&mut r, &[4, 11], 1.0);
        let s = random_tensor(&mut r, &[4, 5], 1.0);
        case(
            &mut out,
            format!("depthwise {padding:?}"),
            &[x, s],
            |g, v| g.depthwise_conv1d(v[0], v[1], 1, padding).unwrap(),
        );
    }
    let x = random_tensor(&mut r, &[5, 3], 1.0);
    let w = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[4], 1.0);
    case(&mut out, "dense", &[x, w, b], |g, v| {
        g.dense(v[0], v[1], v[2]).unwrap()
    });
    out
}

pub fn elementwise_cases() -> Cases {
    let mut r = rng(5);
    let mut out = Vec::new();
    let a = random_tensor(&mut r, &[3, 7], 3.0);
    let b = random_tensor(&mut r, &[3, 7], 3.0);
    let nz = away_from_zero(&mut r, &[3, 7]);
    case(&mut out, "softplus", std::slice::from_ref(&a), |g, v| {
        g.softplus(v[0])
    });
    let big = Tensor::new(vec![4], vec![35.0, -40.0, 50.0, 31.0]).unwrap();
    case(&mut out, "softplus large", &[big], |g, v| g.softplus(v[0]));
    case(&mut out, "abs", std::slice::from_ref(&nz), |g, v| {
        g.abs(v[0])
    });
    case(&mut out, "mul", &[a.clone(), b.clone()], |g, v| {
        g.mul(v[0], v[1]).unwrap()
    });
    case(&mut out, "div", &[a.clone(), nz.clone()], |g, v| {
        g.div(v[0], v[1], 1e-8).unwrap()
    });
    case(&mut out, "add", &[a.clone(), b.clone()], |g, v| {
        g.add(v[0], v[1]).unwrap()
    });
    case(&mut out, "sub", &[a.clone(), b.clone()], |g, v| {
        g.sub(v[0], v[1]).unwrap()
    });
    case(&mut out, "scale", std::slice::from_ref(&a), |g, v| {
        g.scale(v[0], -1.7)
    });
    case(&mut out, "add_scalar", std::slice::from_ref(&a), |g, v| {
        g.add_scalar(v[0], 0.3)
    });
    let bias = random_tensor(&mut r, &[3], 1.0);
    case(&mut out, "channel_bias", &[a.clone(), bias], |g, v| {
        g.channel_bias(v[0], v[1]).unwrap()
    });
    case(&mut out, "sum", std::slice::from_ref(&a), |g, v| {
        g.sum(v[0])
    });
    case(&mut out, "mean", std::slice::from_ref(&a), |g, v| {
        g.mean(v[0])
    });
    case(&mut out, "dot", &[a, b], |g, v| g.dot(v[0], v[1]).unwrap());
    out
}

pub fn layout_cases() -> Cases {
    let mut r = rng(7);
    let mut out = Vec::new();
    // Distinct values spaced far beyond the difference step keep argmaxes fixed.
    let mut vals: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
    vals.shuffle(&mut r);
    let x = Tensor::new(vec![3, 10], vals).unwrap();
    for pool in [1, 3, 4] {
        case(
            &mut out,
            format!("maxpool {pool}"),
            std::slice::from_ref(&x),
            |g, v| g.maxpool1d(v[0], pool).unwrap().values,
        );
    }
    for placement in [
        UnpoolPlacement::WindowStart,
        UnpoolPlacement::RecordedIndices,
    ] {
        case(
            &mut out,
            format!("maxpool+unpool {placement:?}"),
            std::slice::from_ref(&x),
            |g, v| {
                let p = g.maxpool1d(v[0], 4).unwrap();
                g.unpool(p.values, 4, 10, placement, Some(&p.indices))
                    .unwrap()
            },
        );
    }
    let y = random_tensor(&mut r, &[3, 4], 1.0);
    case(&mut out, "unpool", std::slice::from_ref(&y), |g, v| {
        g.unpool(v[0], 3, 11, UnpoolPlacement::WindowStart, None)
            .unwrap()
    });
    case(&mut out, "transpose", std::slice::from_ref(&y), |g, v| {
        g.transpose(v[0]).unwrap()
    });
    case(&mut out, "reshape", std::slice::from_ref(&y), |g, v| {
        g.reshape(v[0], &[2, 6]).unwrap()
    });

    let sig = random_tensor(&mut r, &[1, 40], 1.0);
    let window = Window::hann(16);
    let spec = stft(sig.data(), 16, 4, &window).unwrap();
    let map = Arc::new(IstftMap::new(&spec, &window, 40).unwrap());
    let mags = random_tensor(&mut r, &[spec.frames, spec.bins], 1.0);
    case(&mut out, "istft", &[mags], |g, v| {
        g.linear(v[0], map.clone())
    });

    let p = random_tensor(&mut r, &[1, 20], 1.0);
    let t = random_tensor(&mut r, &[1, 20], 1.0);
    for kind in [LossKind::Mse, LossKind::Sdr] {
        let td = t.data().to_vec();
        case(
            &mut out,
            format!("{} loss", kind.name()),
            std::slice::from_ref(&p),
            |g, v| metrics::loss(g, kind, v[0], &td).unwrap(),
        );
    }
    out
}

/// The gradient-check geometry: K=8, W=16, h=4, T=64.
pub fn tiny_model(kind: FrontendKind) -> ModelConfig {
    ModelConfig {
        frontend: kind,
        aet: AetConfig {
            num_filters: 8,
            filter_width: 16,
            pool: 4,
            smoothing_length: 5,
            tied: kind == FrontendKind::AetOrthogonal,
            placement: UnpoolPlacement::WindowStart,
        },
        stft: StftGeometry { n_fft: 16, hop: 4 },
        separator: SeparatorConfig {
            hidden: 16,
            hidden_layers: 3,
        },
    }
}

fn model_cases(
    out: &mut Cases,
    label: &str,
    model: &SeparationModel,
    mode: Mode,
    loss: LossKind,
    mixture: &[f64],
    source: &[f64],
) {
    let loss_of = |m: &SeparationModel| -> f64 {
        let mut pass = m.forward(mixture, mode).unwrap();
        let root = metrics::loss(&mut pass.graph, loss, pass.estimate, source).unwrap();
        pass.graph.value(root).data()[0]
    };
    let mut pass = model.forward(mixture, mode).unwrap();
    let root = metrics::loss(&mut pass.graph, loss, pass.estimate, source).unwrap();
    let grads = pass.graph.backward(root).unwrap();
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    for (i, name) in names.iter().enumerate() {
        let analytic = grads.get(pass.params[i]).unwrap().data().to_vec();
        let base = model.parameters()[i].1.data().to_vec();
        let numeric = numeric_gradient(&base, |x| {
            let mut m = model.clone();
            m.parameters_mut()[i].data_mut().copy_from_slice(x);
            loss_of(&m)
        });
        assert!(
            numeric.iter().any(|&d| d != 0.0),
            "{label} {name} has an all-zero gradient"
        );
        out.push((
            format!("{label} {name}"),
            relative_error(&analytic, &numeric),
        ));
    }
}

/// Mixture to loss through every front-end and both losses, each
/// trainable tensor, plus one dropout pass with its mask held fixed.
pub fn end_to_end_cases() -> Cases {
    let mut r = rng(10);
    let mixture = random_tensor(&mut r, &[64], 0.5).into_data();
    let source = random_tensor(&mut r, &[64], 0.5).into_data();
    let mut out = Vec::new();
    for kind in [
        FrontendKind::Aet,
        FrontendKind::AetOrthogonal,
        FrontendKind::Stft,
    ] {
        for loss in [LossKind::Sdr, LossKind::Mse] {
            let model = build_model(tiny_model(kind), 3).unwrap();
            let label = format!("{}/{}", kind.name(), loss.name());
            model_cases(
                &mut out,
                &label,
                &model,
                Mode::Inference,
                loss,
                &mixture,
                &source,
            );
        }
    }
    let model = build_model(tiny_model(FrontendKind::Aet), 5).unwrap();
    let mode = Mode::Training {
        dropout: 0.2,
        seed: 9,
    };
    model_cases(
        &mut out,
        "aet/sdr dropout",
        &model,
        mode,
        LossKind::Sdr,
        &mixture,
        &source,
    );
    out
}

pub fn worst(cases: &Cases) -> (String, f64) {
    cases
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default()
}

/// Largest deviation of `short_time_transform` from the direct sum.
pub fn short_time_worst() -> f64 {
    let mut r = rng(20);
    let mut worst = 0.0f64;
    for (len, n, k, hop) in [
        (100, 16, 16, 4),
        (97, 32, 8, 5),
        (64, 64, 64, 64),
        (50, 8, 3, 1),
        (300, 64, 40, 7),
    ] {
        let x: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        let basis = dct2_basis(n, k).unwrap();
        let brute_basis: Vec<Vec<f64>> = brute_dct2(n).into_iter().take(k).collect();
        for window in [Window::hann(n), Window::rectangular(n)] {
            let c = short_time_transform(&x, &basis, &window, hop).unwrap();
            let frames = frame_count(len, n, hop);
            assert_eq!(c.frames, frames);
            let want = brute_short_time(&x, &brute_basis, window.values(), hop, frames);
            for (kk, row) in want.iter().enumerate() {
                for (f, v) in row.iter().enumerate() {
                    worst = worst.max((c.at(kk, f) - v).abs());
                }
            }
        }
    }
    worst
}

/// `max_N ||B B^T - I||_inf` over N = 1..=64.
pub fn dct_orthonormality_worst() -> f64 {
    let mut worst = 0.0f64;
    for n in 1..=64 {
        let b = dct2_basis(n, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(b.row(i), b.row(j)) - want).abs());
            }
        }
    }
    worst
}

/// istft(stft(x)) against x for Hann 1024/16 on one second at 16 kHz,
/// one window trimmed at each end.
pub fn stft_round_trip_worst() -> f64 {
    let mut r = rng(21);
    let (len, n, hop) = (16_000, 1024, 16);
    let x: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w = Window::hann(n);
    let spec = stft(&x, n, hop, &w).unwrap();
    let y = istft(&spec, &w, Some(len)).unwrap();
    assert_eq!(y.len(), len);
    (n..len - n)
        .map(|t| (x[t] - y[t]).abs())
        .fold(0.0, f64::max)
}

/// `|M * P - X|` wherever `M > eps`, over random signals and random AET
/// parameters. Returns the worst error and how many entries were checked.
pub fn demodulation_worst() -> (f64, usize) {
    let mut r = rng(24);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..8u64 {
        let cfg = AetConfig {
            num_filters: 16,
            filter_width: 32,
            pool: 4,
            smoothing_length: 5,
            tied: seed % 2 == 0,
            placement: UnpoolPlacement::WindowStart,
        };
        let mut params = AetParams::init(&cfg, seed).unwrap();
        // Random signs in the smoother and strongly negative biases drive M
        // below the clamp in places.
        for v in params.smoothing.data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        for v in params.smoothing_bias.data_mut() {
            *v = r.gen_range(-20.0..2.0);
        }
        let len = 300 + 50 * seed as usize;
        let x: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let sig = g.constant(Tensor::new(vec![1, len], x).unwrap());
        let enc = aet::encode(&mut g, sig, &vars, &cfg).unwrap();
        let (xs, ms, ps) = (
            g.value(enc.coeffs),
            g.value(enc.magnitude),
            g.value(enc.phase),
        );
        for i in 0..xs.len() {
            let m = ms.data()[i];
            assert!(m >= 0.0);
            if m > PHASE_EPS {
                worst = worst.max((m * ps.data()[i] - xs.data()[i]).abs());
                checked += 1;
            }
        }
    }
    (worst, checked)
}

fn noise(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Largest change in sdr_db under rescaling of the estimate.
pub fn scale_invariance_worst() -> f64 {
    let mut r = rng(30);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let y = noise(&mut r, 64);
        let x: Vec<f64> = y.iter().map(|v| v + 0.5 * r.gen_range(-1.0..1.0)).collect();
        let base = sdr_db(&x, &y).unwrap();
        for c in [1e-3, 0.7, 3.0, -2.5, 1e4] {
            let xs: Vec<f64> = x.iter().map(|v| c * v).collect();
            worst = worst.max((sdr_db(&xs, &y).unwrap() - base).abs());
        }
    }
    worst
}

/// Pairs among 100 random candidates that sdr_loss and sdr_db order
/// differently.
pub fn ranking_violations() -> usize {
    let mut r = rng(31);
    let y = noise(&mut r, 128);
    let candidates: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let mix = r.gen_range(0.0..3.0);
            let gain = r.gen_range(0.1..5.0);
            y.iter()
                .map(|v| gain * (v + mix * r.gen_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let losses: Vec<f64> = candidates.iter().map(|x| sdr_loss_value(x, &y)).collect();
    let sdrs: Vec<f64> = candidates.iter().map(|x| sdr_db(x, &y).unwrap()).collect();
    let mut bad = 0;
    for i in 0..100 {
        for j in 0..100 {
            if losses[i] < losses[j] && sdrs[i] < sdrs[j] {
                bad += 1;
            }
        }
    }
    bad
}

/// The SDR loss of an estimate orthogonal to its reference, through the graph.
pub fn orthogonal_guard_value() -> f64 {
    let y = [1.0, 0.0, -1.0, 0.0];
    let x = [0.0, 1.0, 0.0, -1.0];
    let mut g = Graph::new();
    let xv = g.param(Tensor::vector(x.to_vec()));
    let l = metrics::sdr_loss(&mut g, xv, &y).unwrap();
    g.value(l).data()[0]
}

/// Largest dB difference between one-tap BSS_EVAL and the 2x2 projection
/// oracle over 50 random two-source instances.
pub fn bss_oracle_worst() -> f64 {
    let mut r = rng(32);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let len = 200 + case * 7;
        let a = noise(&mut r, len);
        let b = noise(&mut r, len);
        let (ga, gb, gn) = (
            r.gen_range(0.2..2.0),
            r.gen_range(-1.0..1.0),
            r.gen_range(0.01..1.0),
        );
        let est: Vec<f64> = (0..len)
            .map(|t| ga * a[t] + gb * b[t] + gn * r.gen_range(-1.0..1.0))
            .collect();
        let s = bss_eval(&est, &[&a, &b], 0, 1).unwrap();
        let (sdr, sir, sar) = two_source_projection_scores(&est, &a, &b);
        worst = worst
            .max((s.sdr_db - sdr).abs())
            .max((s.sir_db - sir).abs())
            .max((s.sar_db - sar).abs());
    }
    worst
}

/// Scores of a perfect estimate, and of the sum of two orthogonal
/// equal-energy references scored for the first.
pub fn closed_form_scores() -> (BssScores, BssScores) {
    let mut r = rng(34);
    let a = noise(&mut r, 256);
    let b = noise(&mut r, 256);
    let perfect = bss_eval(&a, &[&a, &b], 0, 1).unwrap();
    let s1: Vec<f64> = (0..256)
        .map(|t| if t % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let s2: Vec<f64> = (0..256)
        .map(|t| if (t / 2) % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    assert_eq!(dot(&s1, &s2), 0.0);
    assert_eq!(dot(&s1, &s1), dot(&s2, &s2));
    let sum: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| x + y).collect();
    (perfect, bss_eval(&sum, &[&s1, &s2], 0, 1).unwrap())
}
