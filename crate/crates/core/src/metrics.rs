//! Training objectives and separation quality metrics.
//!
//! The SDR objective minimizes `<x,x> / <x,y>^2`, which is monotone in the
//! signal-to-distortion ratio `<x,y>^2 / (<y,y><x,x> - <x,y>^2)` for a fixed
//! reference. [`bss_eval`] decomposes an estimate by least-squares
//! projection onto delayed copies of the references.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// Guard added to `<x,y>^2` in the SDR loss.
pub const SDR_LOSS_EPS: f64 = 1e-12;
/// Magnitude of the dB cap applied to every ratio.
pub const DB_CAP: f64 = 300.0;
/// Ridge added to a singular projection system, relative to its mean diagonal.
pub const BSS_RIDGE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: estimate has {estimate} samples, reference has {reference}")]
    LengthMismatch { estimate: usize, reference: usize },
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("estimate signal is all zeros")]
    ZeroEstimate,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Sdr,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Sdr => "sdr",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "sdr" => Ok(LossKind::Sdr),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

fn reference_node(g: &mut Graph, x: Var, y: &[f64]) -> Result<Var, MetricsError> {
    let shape = g.value(x).shape().to_vec();
    if g.value(x).len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            estimate: g.value(x).len(),
            reference: y.len(),
        });
    }
    Ok(g.constant(Tensor::new(shape, y.to_vec())?))
}

/// `(1/T) sum_t (x_t - y_t)^2`.
pub fn mse_loss(g: &mut Graph, x: Var, y: &[f64]) -> Result<Var, MetricsError> {
    let yv = reference_node(g, x, y)?;
    let diff = g.sub(x, yv)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// `<x,x> / (<x,y>^2 + eps)`.
pub fn sdr_loss(g: &mut Graph, x: Var, y: &[f64]) -> Result<Var, MetricsError> {
    if y.iter().all(|&v| v == 0.0) {
        return Err(MetricsError::ZeroReference);
    }
    let yv = reference_node(g, x, y)?;
    let xx = g.dot(x, x)?;
    let xy = g.dot(x, yv)?;
    let xy2 = g.mul(xy, xy)?;
    let den = g.add_scalar(xy2, SDR_LOSS_EPS);
    Ok(g.div(xx, den, f64::MIN_POSITIVE)?)
}

pub fn loss(g: &mut Graph, kind: LossKind, x: Var, y: &[f64]) -> Result<Var, MetricsError> {
    match kind {
        LossKind::Mse => mse_loss(g, x, y),
        LossKind::Sdr => sdr_loss(g, x, y),
    }
}

/// Plain-value SDR loss, for reporting.
pub fn sdr_loss_value(x: &[f64], y: &[f64]) -> f64 {
    let xx = dot(x, x);
    let xy = dot(x, y);
    xx / (xy * xy + SDR_LOSS_EPS)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `10 log10(num / den)`, capped to `±DB_CAP`.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -DB_CAP;
    }
    if den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Scale-invariant SDR of estimate `x` against reference `y`, in dB.
/// Returns the `+300` cap when the distortion term vanishes relative to
/// `<x,x><y,y>`.
pub fn sdr_db(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            estimate: x.len(),
            reference: y.len(),
        });
    }
    let (xx, yy, xy) = (dot(x, x), dot(y, y), dot(x, y));
    if yy == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    if xx == 0.0 {
        return Err(MetricsError::ZeroEstimate);
    }
    let num = xy * xy;
    let den = yy * xx - num;
    if den <= 1e-24 * yy * xx {
        return Ok(DB_CAP);
    }
    Ok(ratio_db(num, den))
}

/// BSS_EVAL-style scores in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BssScores {
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
    pub filter_len: usize,
    /// The projection system was singular and solved with a ridge.
    pub regularized: bool,
}

/// `estimate = target + interference + artifacts`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interference: Vec<f64>,
    pub artifacts: Vec<f64>,
    pub regularized: bool,
}

/// Gram matrix of the delayed copies `s_j[t - l]`, `l < taps`, truncated to
/// `len` samples, with column index `j * taps + l`.
fn delayed_gram(refs: &[&[f64]], taps: usize) -> DMatrix<f64> {
    let len = refs[0].len();
    let n = refs.len() * taps;
    let mut gram = DMatrix::zeros(n, n);
    for (i, si) in refs.iter().enumerate() {
        for (j, sj) in refs.iter().enumerate() {
            // Entry (l1, l2) = sum_{t >= max(l1, l2)} si[t - l1] sj[t - l2].
            let mut block = DMatrix::zeros(taps, taps);
            for lag in 0..taps {
                let mut acc = 0.0;
                for t in lag..len {
                    acc += si[t - lag] * sj[t];
                }
                block[(lag, 0)] = acc;
                let mut acc = 0.0;
                for t in lag..len {
                    acc += si[t] * sj[t - lag];
                }
                block[(0, lag)] = acc;
            }
            // Moving both delays up by one drops the final sample of the sum.
            for l1 in 1..taps {
                for l2 in 1..taps {
                    let t = len as isize - 1;
                    let a = t - (l1 as isize - 1);
                    let b = t - (l2 as isize - 1);
                    let drop = if a >= 0 && b >= 0 {
                        si[a as usize] * sj[b as usize]
                    } else {
                        0.0
                    };
                    block[(l1, l2)] = block[(l1 - 1, l2 - 1)] - drop;
                }
            }
            gram.view_mut((i * taps, j * taps), (taps, taps))
                .copy_from(&block);
        }
    }
    gram
}

fn delayed_rhs(refs: &[&[f64]], taps: usize, est: &[f64]) -> DVector<f64> {
    let len = est.len();
    DVector::from_iterator(
        refs.len() * taps,
        refs.iter()
            .flat_map(|s| (0..taps).map(move |l| (l..len).map(|t| est[t] * s[t - l]).sum::<f64>())),
    )
}

fn solve_spd(gram: DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(ch) = gram.clone().cholesky() {
        let x = ch.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return (x, false);
        }
    }
    let n = gram.nrows();
    let scale = (gram.trace() / n as f64).max(f64::MIN_POSITIVE);
    let mut reg = gram;
    for i in 0..n {
        reg[(i, i)] += BSS_RIDGE * scale;
    }
    let x = match reg.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => reg.lu().solve(rhs).unwrap_or_else(|| DVector::zeros(n)),
    };
    (x, true)
}

fn synthesize(refs: &[&[f64]], taps: usize, coeffs: &DVector<f64>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (j, s) in refs.iter().enumerate() {
        for l in 0..taps {
            let c = coeffs[j * taps + l];
            if c == 0.0 {
                continue;
            }
            for t in l..len {
                out[t] += c * s[t - l];
            }
        }
    }
    out
}

/// Least-squares decomposition of `estimate` against delayed copies of the
/// references (`filter_len` taps each).
pub fn bss_decompose(
    estimate: &[f64],
    references: &[&[f64]],
    target: usize,
    filter_len: usize,
) -> Result<Decomposition, MetricsError> {
    if references.is_empty() || target >= references.len() {
        return Err(MetricsError::InvalidArgument(format!(
            "target index {target} for {} references",
            references.len()
        )));
    }
    if filter_len == 0 {
        return Err(MetricsError::InvalidArgument(
            "filter length must be at least 1".into(),
        ));
    }
    for r in references {
        if r.len() != estimate.len() {
            return Err(MetricsError::LengthMismatch {
                estimate: estimate.len(),
                reference: r.len(),
            });
        }
        if r.iter().all(|&v| v == 0.0) {
            return Err(MetricsError::ZeroReference);
        }
    }
    let len = estimate.len();
    let taps = filter_len.min(len);

    let own = [references[target]];
    let (c_target, reg_t) = solve_spd(delayed_gram(&own, taps), &delayed_rhs(&own, taps, estimate));
    let target_part = synthesize(&own, taps, &c_target, len);

    let (c_all, reg_a) = solve_spd(
        delayed_gram(references, taps),
        &delayed_rhs(references, taps, estimate),
    );
    let all_part = synthesize(references, taps, &c_all, len);

    let interference = all_part
        .iter()
        .zip(&target_part)
        .map(|(a, t)| a - t)
        .collect();
    let artifacts = estimate.iter().zip(&all_part).map(|(e, a)| e - a).collect();
    Ok(Decomposition {
        target: target_part,
        interference,
        artifacts,
        regularized: reg_t || reg_a,
    })
}

fn energy(x: &[f64]) -> f64 {
    dot(x, x)
}

/// SDR, SIR and SAR of `estimate` for source `target`.
pub fn bss_eval(
    estimate: &[f64],
    references: &[&[f64]],
    target: usize,
    filter_len: usize,
) -> Result<BssScores, MetricsError> {
    if estimate.iter().all(|&v| v == 0.0) {
        return Err(MetricsError::ZeroEstimate);
    }
    let d = bss_decompose(estimate, references, target, filter_len)?;
    let e_t = energy(&d.target);
    let e_i = energy(&d.interference);
    let e_a = energy(&d.artifacts);
    let distortion: Vec<f64> = d
        .interference
        .iter()
        .zip(&d.artifacts)
        .map(|(i, a)| i + a)
        .collect();
    let signal: Vec<f64> = d
        .target
        .iter()
        .zip(&d.interference)
        .map(|(t, i)| t + i)
        .collect();
    let floor = 1e-30 * energy(estimate);
    let den = |e: f64| if e <= floor { 0.0 } else { e };
    Ok(BssScores {
        sdr_db: ratio_db(e_t, den(energy(&distortion))),
        sir_db: ratio_db(e_t, den(e_i)),
        sar_db: ratio_db(energy(&signal), den(e_a)),
        filter_len: filter_len.min(estimate.len()),
        regularized: d.regularized,
    })
}
