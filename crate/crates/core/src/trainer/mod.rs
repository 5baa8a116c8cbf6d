//! Optimization loop, optimizers and per-epoch telemetry.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::corpus::{self, CorpusError, MixturePair, TargetSource};
use crate::metrics::{self, LossKind, MetricsError, DB_CAP};
use crate::par;
use crate::separator::{Mode, SeparationModel, SeparatorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shape mismatch in optimizer update: {0}")]
    Shape(String),
    #[error("training diverged: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("no training mixtures")]
    EmptyCorpus,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    /// Segment length in samples.
    pub segment_len: usize,
    /// Caps batches per epoch; by default every sentence is covered once.
    pub batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Sdr,
            epochs: 20,
            batch_size: 16,
            dropout: 0.2,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            seed: 0,
            segment_len: 16_384,
            batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.segment_len == 0 {
            return Err(TrainError::Config(
                "batch_size and segment_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(TrainError::Config(
                "batches_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer step count and Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn for_model(model: &SeparationModel) -> Self {
        let params: Vec<&Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
        Self::new(&params)
    }
}

fn check_shapes(
    params: &[&mut Tensor],
    grads: &[Tensor],
    state: Option<&OptimizerState>,
) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TrainError::Shape(format!(
                "parameter {i} is {:?}, gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(s) = state {
            let ok = s.first.get(i).is_some_and(|m| m.shape() == p.shape())
                && s.second.get(i).is_some_and(|v| v.shape() == p.shape());
            if !ok {
                return Err(TrainError::Shape(format!(
                    "optimizer moments for parameter {i} do not match {:?}",
                    p.shape()
                )));
            }
        }
    }
    if let Some(s) = state {
        if s.first.len() != params.len() || s.second.len() != params.len() {
            return Err(TrainError::Shape(
                "optimizer state has the wrong number of tensors".into(),
            ));
        }
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    check_shapes(params, grads, Some(state))?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Plain gradient descent; `state` only counts steps.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    check_shapes(params, grads, None)?;
    state.step += 1;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// One training pair of equal-length signals.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub mixture: &'a [f64],
    pub source: &'a [f64],
}

/// Mean loss and mean parameter gradients over a batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Examples that contributed. Segments with a silent reference are
    /// skipped under the SDR loss, whose value is undefined there.
    pub used: usize,
}

fn example_seed(seed: u64, step: u64, index: usize) -> u64 {
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn example_gradients(
    model: &SeparationModel,
    ex: &Example,
    loss: LossKind,
    mode: Mode,
) -> Result<Option<(f64, Vec<Tensor>)>, TrainError> {
    if loss == LossKind::Sdr && ex.source.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let mut pass = model.forward(ex.mixture, mode)?;
    let root = metrics::loss(&mut pass.graph, loss, pass.estimate, ex.source)?;
    let value = pass.graph.value(root).data()[0];
    let mut grads = pass.graph.backward(root)?;
    let out = pass
        .params
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(pass.graph.value(v).shape()))
        })
        .collect();
    Ok(Some((value, out)))
}

/// Builds one graph per example (in parallel when enabled) and averages the
/// results in input order, so the outcome does not depend on thread count.
pub fn batch_gradients(
    model: &SeparationModel,
    examples: &[Example],
    loss: LossKind,
    dropout: f64,
    seed: u64,
    step: u64,
    parallel: bool,
) -> Result<BatchGradients, TrainError> {
    let run = |(i, ex): &(usize, &Example)| {
        let mode = if dropout > 0.0 {
            Mode::Training {
                dropout,
                seed: example_seed(seed, step, *i),
            }
        } else {
            Mode::Inference
        };
        example_gradients(model, ex, loss, mode)
    };
    let indexed: Vec<(usize, &Example)> = examples.iter().enumerate().collect();
    let results = if parallel {
        par::map(&indexed, run)
    } else {
        par::map_sequential(&indexed, run)
    };
    let mut total = 0.0;
    let mut used = 0usize;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in results {
        let Some((value, grads)) = r? else { continue };
        total += value;
        used += 1;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => {
                for (x, g) in a.iter_mut().zip(&grads) {
                    x.add_assign(g);
                }
            }
        }
    }
    let grads = match acc {
        Some(mut a) => {
            let inv = 1.0 / used as f64;
            for t in &mut a {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            a
        }
        None => model
            .parameters()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect(),
    };
    let loss = if used == 0 { 0.0 } else { total / used as f64 };
    Ok(BatchGradients { loss, grads, used })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean sdr_db over held-out sentences; NaN when there are none.
    pub val_sdr_db: f64,
}

/// Owns a model and its optimizer state during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SeparationModel,
    pub config: TrainConfig,
    pub state: OptimizerState,
    pub log: Vec<EpochLog>,
    pub parallel: bool,
}

impl Trainer {
    pub fn new(model: SeparationModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let state = OptimizerState::for_model(&model);
        Ok(Self {
            model,
            config,
            state,
            log: Vec::new(),
            parallel: par::is_parallel(),
        })
    }

    /// One optimizer update on `examples`. Returns the batch loss measured
    /// before the update.
    pub fn step(&mut self, examples: &[Example]) -> Result<BatchGradients, TrainError> {
        let out = batch_gradients(
            &self.model,
            examples,
            self.config.loss,
            self.config.dropout,
            self.config.seed,
            self.state.step,
            self.parallel,
        )?;
        if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged {
                epoch: self.log.len() + 1,
                batch: 0,
                loss: out.loss,
            });
        }
        if out.used == 0 {
            return Ok(out);
        }
        let lr = self.config.learning_rate;
        let mut params = self.model.parameters_mut();
        match self.config.optimizer {
            OptimizerKind::Adam => adam_step(&mut params, &out.grads, &mut self.state, lr)?,
            OptimizerKind::Sgd => sgd_step(&mut params, &out.grads, &mut self.state, lr)?,
        }
        Ok(out)
    }

    /// Runs one epoch of seeded segment batches and validation; appends and
    /// returns its log entry.
    pub fn epoch(
        &mut self,
        train: &[MixturePair],
        val: &[MixturePair],
        target: TargetSource,
    ) -> Result<EpochLog, TrainError> {
        let epoch = self.log.len() + 1;
        let batches = corpus::batch_segments(
            train,
            target,
            self.config.segment_len,
            self.config.batch_size,
            self.config.seed,
            epoch,
            self.config.batches_per_epoch,
        )?;
        let mut total = 0.0;
        let mut counted = 0usize;
        for (b, batch) in batches.enumerate() {
            let examples: Vec<Example> = (0..batch.size())
                .map(|i| Example {
                    mixture: batch.mixture(i),
                    source: batch.source(i),
                })
                .collect();
            let out = self.step(&examples).map_err(|e| match e {
                TrainError::Diverged { loss, .. } => TrainError::Diverged {
                    epoch,
                    batch: b + 1,
                    loss,
                },
                other => other,
            })?;
            if out.used > 0 {
                total += out.loss;
                counted += 1;
            }
        }
        let entry = EpochLog {
            epoch,
            train_loss: if counted == 0 {
                f64::NAN
            } else {
                total / counted as f64
            },
            val_sdr_db: validation_sdr(&self.model, val, target, self.parallel)?,
        };
        self.log.push(entry);
        Ok(entry)
    }
}

/// Mean sdr_db of full-sentence separations. A silent estimate scores the
/// lower cap.
pub fn validation_sdr(
    model: &SeparationModel,
    pairs: &[MixturePair],
    target: TargetSource,
    parallel: bool,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let score = |p: &MixturePair| -> Result<f64, TrainError> {
        let est = model.separate(p.mixture.samples())?;
        match metrics::sdr_db(&est, p.target(target).samples()) {
            Ok(v) => Ok(v),
            Err(MetricsError::ZeroEstimate) => Ok(-DB_CAP),
            Err(e) => Err(e.into()),
        }
    };
    let scores = if parallel {
        par::map(pairs, score)
    } else {
        par::map_sequential(pairs, score)
    };
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: SeparationModel,
    train_pairs: &[MixturePair],
    val_pairs: &[MixturePair],
    target: TargetSource,
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trainer, TrainError> {
    let mut trainer = Trainer::new(model, config)?;
    if trainer.config.epochs > 0 && train_pairs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for _ in 0..trainer.config.epochs {
        let entry = trainer.epoch(train_pairs, val_pairs, target)?;
        on_epoch(&entry);
    }
    Ok(trainer)
}
