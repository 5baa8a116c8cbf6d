//! Frame-wise magnitude separator and the three end-to-end graphs: STFT
//! front-end with inverse STFT under the mixture phase, and the learned AET
//! front-end in plain and orthogonal (tied) form.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aet::{self, AetConfig, AetError, AetParams, AetVars};
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::frontends::{self, FrontendError, IstftMap, Window};

#[derive(Debug, Error)]
pub enum SeparatorError {
    #[error("unsupported model geometry: {0}")]
    Geometry(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Aet(#[from] AetError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    Stft,
    Aet,
    AetOrthogonal,
}

impl FrontendKind {
    pub fn name(self) -> &'static str {
        match self {
            FrontendKind::Stft => "stft",
            FrontendKind::Aet => "aet",
            FrontendKind::AetOrthogonal => "aet_orthogonal",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "stft" => Some(FrontendKind::Stft),
            "aet" => Some(FrontendKind::Aet),
            "aet_orthogonal" => Some(FrontendKind::AetOrthogonal),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftGeometry {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftGeometry {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            hidden_layers: 3,
        }
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frontend: FrontendKind,
    pub aet: AetConfig,
    pub stft: StftGeometry,
    pub separator: SeparatorConfig,
}

impl ModelConfig {
    pub fn new(frontend: FrontendKind) -> Self {
        Self {
            frontend,
            aet: AetConfig {
                tied: frontend == FrontendKind::AetOrthogonal,
                ..AetConfig::default()
            },
            stft: StftGeometry::default(),
            separator: SeparatorConfig::default(),
        }
    }

    /// Width of one separator input frame.
    pub fn frame_width(&self) -> usize {
        match self.frontend {
            FrontendKind::Stft => self.stft.n_fft / 2 + 1,
            _ => self.aet.num_filters,
        }
    }

    /// Shortest mixture the front-end accepts.
    pub fn min_len(&self) -> usize {
        match self.frontend {
            FrontendKind::Stft => 1,
            _ => self.aet.filter_width,
        }
    }

    pub fn validate(&self) -> Result<(), SeparatorError> {
        match self.frontend {
            FrontendKind::Stft => {
                let StftGeometry { n_fft, hop } = self.stft;
                if n_fft < 2 || n_fft % 2 != 0 || hop == 0 || hop > n_fft / 2 {
                    return Err(SeparatorError::Geometry(format!(
                        "STFT needs an even FFT size and 1 <= hop <= n_fft/2, got {n_fft}/{hop}"
                    )));
                }
            }
            kind => {
                self.aet.validate()?;
                if self.aet.tied != (kind == FrontendKind::AetOrthogonal) {
                    return Err(SeparatorError::Geometry(format!(
                        "{} front-end with tied = {}",
                        kind.name(),
                        self.aet.tied
                    )));
                }
            }
        }
        if self.separator.hidden == 0 || self.separator.hidden_layers == 0 {
            return Err(SeparatorError::Geometry(
                "separator needs at least one non-empty hidden layer".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[D_in, D_out]`.
    pub weight: Tensor,
    /// `[D_out]`.
    pub bias: Tensor,
}

/// Hidden dense layers followed by an output projection back to the frame
/// width, each followed by softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorParams {
    pub layers: Vec<DenseLayer>,
}

impl SeparatorParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(frame_width: usize, config: &SeparatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![frame_width];
        dims.extend(std::iter::repeat_n(config.hidden, config.hidden_layers));
        dims.push(frame_width);
        let layers = dims
            .windows(2)
            .map(|d| {
                let bound = (6.0 / (d[0] + d[1]) as f64).sqrt();
                let w = (0..d[0] * d[1])
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                DenseLayer {
                    weight: Tensor::new(vec![d[0], d[1]], w).expect("layer shape"),
                    bias: Tensor::zeros(&[d[1]]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// A front-end, a separator, and (for learned front-ends) a decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationModel {
    pub config: ModelConfig,
    pub aet: Option<AetParams>,
    pub separator: SeparatorParams,
}

/// How a forward pass treats dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Inference,
    Training { dropout: f64, seed: u64 },
}

/// A built graph with the estimate node and the parameter leaves, in
/// [`SeparationModel::parameters`] order.
pub struct ForwardPass {
    pub graph: Graph,
    /// `[1, T]`.
    pub estimate: Var,
    pub params: Vec<Var>,
}

impl ForwardPass {
    pub fn estimate(&self) -> &[f64] {
        self.graph.value(self.estimate).data()
    }
}

/// Builds and deterministically initializes a model.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<SeparationModel, SeparatorError> {
    config.validate()?;
    let aet = match config.frontend {
        FrontendKind::Stft => None,
        _ => Some(AetParams::init(&config.aet, seed)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let separator = SeparatorParams::init(config.frame_width(), &config.separator, &mut rng);
    Ok(SeparationModel {
        config,
        aet,
        separator,
    })
}

impl SeparationModel {
    pub fn frontend_trainable_count(&self) -> usize {
        self.aet.as_ref().map_or(0, AetParams::trainable_count)
    }

    pub fn trainable_count(&self) -> usize {
        self.frontend_trainable_count() + self.separator.trainable_count()
    }

    /// Named trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(a) = &self.aet {
            out.push(("aet.analysis".to_string(), &a.analysis));
            out.push(("aet.smoothing".to_string(), &a.smoothing));
            out.push(("aet.smoothing_bias".to_string(), &a.smoothing_bias));
            if let Some(s) = &a.synthesis {
                out.push(("aet.synthesis".to_string(), s));
            }
        }
        for (i, l) in self.separator.layers.iter().enumerate() {
            out.push((format!("sep.{i}.weight"), &l.weight));
            out.push((format!("sep.{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable view of [`SeparationModel::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.aet {
            out.push(&mut a.analysis);
            out.push(&mut a.smoothing);
            out.push(&mut a.smoothing_bias);
            if let Some(s) = &mut a.synthesis {
                out.push(s);
            }
        }
        for l in &mut self.separator.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Builds the full differentiable graph from mixture to estimate.
    pub fn forward(&self, mixture: &[f64], mode: Mode) -> Result<ForwardPass, SeparatorError> {
        if mixture.is_empty() {
            return Err(SeparatorError::Input("empty mixture".into()));
        }
        if let Mode::Training { dropout, .. } = mode {
            if !(0.0..1.0).contains(&dropout) {
                return Err(SeparatorError::Input(format!(
                    "dropout rate {dropout} outside [0, 1)"
                )));
            }
        }
        let mut g = Graph::new();
        let len = mixture.len();
        match self.config.frontend {
            FrontendKind::Stft => {
                let StftGeometry { n_fft, hop } = self.config.stft;
                let window = Window::hann(n_fft);
                let spec = frontends::stft(mixture, n_fft, hop, &window)?;
                let mag = g.constant(Tensor::new(vec![spec.frames, spec.bins], spec.magnitude())?);
                let (est_mag, params) = self.separate_frames(&mut g, mag, mode)?;
                let map = Arc::new(IstftMap::new(&spec, &window, len)?);
                let estimate = g.linear(est_mag, map);
                Ok(ForwardPass {
                    graph: g,
                    estimate,
                    params,
                })
            }
            _ => {
                let aet_params = self.aet.as_ref().ok_or_else(|| {
                    SeparatorError::Geometry("learned front-end has no parameters".into())
                })?;
                let cfg = &self.config.aet;
                if len < cfg.filter_width {
                    return Err(AetError::SignalTooShort {
                        len,
                        width: cfg.filter_width,
                    }
                    .into());
                }
                let vars: AetVars = aet_params.bind(&mut g, true);
                let x = g.constant(Tensor::new(vec![1, len], mixture.to_vec())?);
                let enc = aet::encode(&mut g, x, &vars, cfg)?;
                let frames = g.transpose(enc.pooled)?;
                let (est_frames, sep_params) = self.separate_frames(&mut g, frames, mode)?;
                let est_pooled = g.transpose(est_frames)?;
                let estimate = aet::decode(&mut g, est_pooled, &enc, &vars, cfg)?;
                let mut params = vec![vars.analysis, vars.smoothing, vars.smoothing_bias];
                params.extend(vars.synthesis);
                params.extend(sep_params);
                Ok(ForwardPass {
                    graph: g,
                    estimate,
                    params,
                })
            }
        }
    }

    /// Applies the separator to each row of a `[frames, width]` node.
    fn separate_frames(
        &self,
        g: &mut Graph,
        frames: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<Var>), SeparatorError> {
        let width = g.value(frames).shape()[1];
        if width != self.config.frame_width() {
            return Err(SeparatorError::Geometry(format!(
                "front-end produces {width}-wide frames, separator expects {}",
                self.config.frame_width()
            )));
        }
        let mut rng = match mode {
            Mode::Training { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Inference => None,
        };
        let hidden_count = self.separator.layers.len() - 1;
        let mut h = frames;
        let mut params = Vec::with_capacity(2 * self.separator.layers.len());
        for (i, layer) in self.separator.layers.iter().enumerate() {
            if let (Mode::Training { dropout, .. }, Some(rng)) = (mode, rng.as_mut()) {
                if i < hidden_count && dropout > 0.0 {
                    let keep = 1.0 / (1.0 - dropout);
                    let shape = g.value(h).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let mask = (0..n)
                        .map(|_| {
                            if rng.gen::<f64>() < dropout {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let m = g.constant(Tensor::new(shape, mask)?);
                    h = g.mul(h, m)?;
                }
            }
            let w = g.param(layer.weight.clone());
            let b = g.param(layer.bias.clone());
            params.push(w);
            params.push(b);
            let z = g.dense(h, w, b)?;
            h = g.softplus(z);
        }
        Ok((h, params))
    }

    /// Inference-mode separation.
    pub fn separate(&self, mixture: &[f64]) -> Result<Vec<f64>, SeparatorError> {
        Ok(self.forward(mixture, Mode::Inference)?.estimate().to_vec())
    }
}
