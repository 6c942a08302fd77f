use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use seunet::data::PhantomConfig;
use seunet::infer::{EnsembleConfig, FoldKind, InferConfig};
use seunet::train::TrainConfig;
use seunet::ModelConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub kind: FoldKind,
    pub n_random_folds: usize,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            kind: FoldKind::LeaveOneCenterOut,
            n_random_folds: 5,
            val_fraction: 0.2,
        }
    }
}

/// Everything a run needs, loadable from one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub ensemble: EnsembleConfig,
    pub phantom: PhantomConfig,
    pub split: SplitConfig,
    /// Isotropic spacing in mm that cases are resampled to.
    pub target_spacing: f32,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            ensemble: EnsembleConfig::default(),
            phantom: PhantomConfig::default(),
            split: SplitConfig::default(),
            target_spacing: 1.0,
            manifest: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: seunet::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.infer.validate(self.model.divisor()).map_err(cfg)?;
        self.ensemble.validate().map_err(cfg)?;
        if self.target_spacing.is_nan() || self.target_spacing <= 0.0 {
            return Err(CliError::Config(format!(
                "target_spacing {} must be positive",
                self.target_spacing
            )));
        }
        let s = &self.split;
        if !(s.val_fraction > 0.0 && s.val_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "split.val_fraction {} must lie in (0, 1)",
                s.val_fraction
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
