//! Run configuration: one JSON file drives data location (or synthesis),
//! quality control, the experiment grid, hyperparameters, and outputs.
//! Unknown keys are rejected. The output directory may be overridden by
//! the `IR_PIPELINE_OUT` environment variable; nothing else reads the
//! environment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::IrThresholds;
use crate::featureset::{feature_set_by_name, FeatureSetSpec, Panel, PanelCatalog};
use crate::gbm::{BoosterKind, GbmParams};
use crate::ingest::QcConfig;
use crate::pipeline::{AeSettings, CvScheme, ExperimentSpec, ModelScheme, DEFAULT_SEEDS};
use crate::synthcohort::{CohortCalibration, FunctionalSpec, PlantedViolations};

pub const OUTPUT_DIR_ENV: &str = "IR_PIPELINE_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("config error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Feature(#[from] crate::featureset::FeatureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub participants: PathBuf,
    pub wearables: PathBuf,
    pub labs: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Calibrated,
    Functional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub calibration: Option<CohortCalibration>,
    #[serde(default)]
    pub functional: Option<FunctionalSpec>,
    #[serde(default)]
    pub violations: PlantedViolations,
}

/// A feature set named in the registry or spelled out as panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureSetChoice {
    Named(String),
    Panels { name: String, panels: Vec<Panel> },
}

impl FeatureSetChoice {
    pub fn resolve(&self) -> Result<FeatureSetSpec, ConfigError> {
        match self {
            FeatureSetChoice::Named(name) => Ok(feature_set_by_name(name)?),
            FeatureSetChoice::Panels { name, panels } => {
                Ok(FeatureSetSpec::new(name, panels))
            }
        }
    }
}

fn default_window() -> u32 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub feature_set: FeatureSetChoice,
    #[serde(default = "default_window")]
    pub window_days: u32,
    pub scheme: ModelScheme,
    #[serde(default = "default_cv")]
    pub cv: CvScheme,
    #[serde(default)]
    pub stratified_folds: bool,
}

fn default_cv() -> CvScheme {
    CvScheme::KFold5
}

fn default_tree_params() -> GbmParams {
    GbmParams::default()
}

fn default_linear_params() -> GbmParams {
    GbmParams {
        booster: BoosterKind::Linear,
        n_estimators: 200,
        learning_rate: 0.5,
        reg_lambda: 0.1,
        reg_alpha: 0.0,
        ..GbmParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    #[serde(default = "default_tree_params")]
    pub tree: GbmParams,
    #[serde(default = "default_linear_params")]
    pub linear: GbmParams,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tree: default_tree_params(),
            linear: default_linear_params(),
        }
    }
}

fn default_sweep_windows() -> Vec<u32> {
    crate::robustness::SWEEP_WINDOWS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    #[serde(default = "default_sweep_windows")]
    pub windows: Vec<u32>,
    /// Overlapping stride (days); omitted means contiguous tiles.
    #[serde(default)]
    pub stride: Option<u32>,
    /// Experiments (by name) whose fold-0 models drive the sweep.
    #[serde(default)]
    pub experiments: Vec<String>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            windows: default_sweep_windows(),
            stride: None,
            experiments: Vec::new(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Existing cohort files; mutually exclusive with `synth`.
    #[serde(default)]
    pub data: Option<DataPaths>,
    /// Generate a cohort instead of reading one.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub qc: QcConfig,
    #[serde(default)]
    pub thresholds: IrThresholds,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub experiments: Vec<ExperimentConfig>,
    #[serde(default)]
    pub hyperparameters: HyperParams,
    #[serde(default)]
    pub autoencoder: AeSettings,
    #[serde(default)]
    pub robustness: RobustnessConfig,
    /// Metabolic-panel analytes used when expanding that panel.
    #[serde(default)]
    pub metabolic_analytes: Option<Vec<String>>,
    /// Rayon worker count; 0 or omitted uses the default pool.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut config: RunConfig =
            serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                source: e,
            })?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                config.output_dir = PathBuf::from(dir);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data.is_some() && self.synth.is_some() {
            return Err(ConfigError::Invalid(
                "specify either 'data' or 'synth', not both".into(),
            ));
        }
        if self.data.is_none() && self.synth.is_none() {
            return Err(ConfigError::Invalid(
                "one of 'data' or 'synth' is required".into(),
            ));
        }
        if let Some(synth) = &self.synth {
            match synth.kind {
                SynthKind::Calibrated if synth.functional.is_some() => {
                    return Err(ConfigError::Invalid(
                        "calibrated synthesis does not take 'functional'".into(),
                    ));
                }
                SynthKind::Functional if synth.calibration.is_some() => {
                    return Err(ConfigError::Invalid(
                        "functional synthesis does not take 'calibration'".into(),
                    ));
                }
                _ => {}
            }
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("'seeds' must be non-empty".into()));
        }
        let mut seen = BTreeMap::new();
        for exp in &self.experiments {
            if let Some(_prev) = seen.insert(exp.name.clone(), ()) {
                return Err(ConfigError::Invalid(format!(
                    "duplicate experiment name '{}'",
                    exp.name
                )));
            }
        }
        Ok(())
    }

    pub fn catalog(&self) -> PanelCatalog {
        match &self.metabolic_analytes {
            Some(list) => PanelCatalog {
                metabolic_analytes: list.clone(),
            },
            None => PanelCatalog::default(),
        }
    }

    /// Expand the experiment list into runnable specs.
    pub fn resolve_experiments(&self) -> Result<Vec<ExperimentSpec>, ConfigError> {
        let catalog = self.catalog();
        self.experiments
            .iter()
            .map(|exp| {
                let feature_set = exp.feature_set.resolve()?;
                let gbm = match exp.scheme {
                    ModelScheme::TreeDirect => self.hyperparameters.tree.clone(),
                    _ => self.hyperparameters.linear.clone(),
                };
                Ok(ExperimentSpec {
                    name: exp.name.clone(),
                    feature_set,
                    window_days: exp.window_days,
                    scheme: exp.scheme,
                    cv: exp.cv,
                    seeds: self.seeds.clone(),
                    thresholds: self.thresholds,
                    gbm,
                    ae: self.autoencoder.clone(),
                    stratified_folds: exp.stratified_folds,
                    catalog: catalog.clone(),
                })
            })
            .collect()
    }
}
