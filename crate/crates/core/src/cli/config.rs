//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::aet::{placement_serde, AetConfig};
use crate::autodiff::UnpoolPlacement;
use crate::corpus::TargetSource;
use crate::separator::{FrontendKind, ModelConfig, SeparatorConfig, StftGeometry};
use crate::trainer::TrainConfig;

/// Learned front-end geometry. Whether synthesis is tied to analysis
/// follows from the front-end kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AetSection {
    pub num_filters: usize,
    pub filter_width: usize,
    pub pool: usize,
    pub smoothing_length: usize,
    #[serde(with = "placement_serde")]
    pub placement: UnpoolPlacement,
}

impl Default for AetSection {
    fn default() -> Self {
        let d = AetConfig::default();
        Self {
            num_filters: d.num_filters,
            filter_width: d.filter_width,
            pool: d.pool,
            smoothing_length: d.smoothing_length,
            placement: d.placement,
        }
    }
}

fn default_target() -> TargetSource {
    TargetSource::A
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest written by `mix`.
    pub manifest: PathBuf,
    /// Receives `checkpoint.bin` and `train_log.csv`.
    pub output_dir: PathBuf,
    pub frontend: FrontendKind,
    #[serde(default = "default_target")]
    pub target: TargetSource,
    #[serde(default)]
    pub aet: AetSection,
    #[serde(default)]
    pub stft: StftGeometry,
    #[serde(default)]
    pub separator: SeparatorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Report sdr_db on the held-out test sentences after every epoch.
    #[serde(default = "default_true")]
    pub validate_on_test: bool,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        for p in [&mut cfg.manifest, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.model_config()
            .validate()
            .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.train
            .validate()
            .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frontend: self.frontend,
            aet: AetConfig {
                num_filters: self.aet.num_filters,
                filter_width: self.aet.filter_width,
                pool: self.aet.pool,
                smoothing_length: self.aet.smoothing_length,
                tied: self.frontend == FrontendKind::AetOrthogonal,
                placement: self.aet.placement,
            },
            stft: self.stft,
            separator: self.separator,
        }
    }
}
