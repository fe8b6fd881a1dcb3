//! Versioned model bundles: a fold's standardizer, optional autoencoder,
//! and booster frozen together with their feature columns, plus the
//! frozen-model prediction path for external cohorts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::Autoencoder;
use crate::domain::{classify_value, IrClass, IrThresholds, ParticipantRecord};
use crate::featureset::{aggregate_available, AggregationWindow, StandardizerParams};
use crate::gbm::GbmModel;
use crate::pipeline::{ExperimentResult, FoldModel, PipelineError, PredictionRecord, PredictionSet};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("invalid model bundle {path}: {source}")]
    Format {
        path: std::path::PathBuf,
        source: serde_json::Error,
    },
    #[error("unsupported bundle version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

/// A frozen model: everything needed to standardize raw feature rows and
/// predict HOMA-IR without refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub name: String,
    pub feature_set: String,
    pub window_days: u32,
    pub fold: usize,
    pub thresholds: IrThresholds,
    /// Design-matrix columns before standardization.
    pub raw_columns: Vec<String>,
    pub standardizer: StandardizerParams,
    pub autoencoder: Option<Autoencoder>,
    pub gbm: GbmModel,
}

impl ModelBundle {
    pub fn from_fold(
        result: &ExperimentResult,
        fold: usize,
        thresholds: IrThresholds,
    ) -> ModelBundle {
        let fm = &result.fold_models[fold];
        ModelBundle {
            version: BUNDLE_VERSION,
            name: result.name.clone(),
            feature_set: result.feature_set.clone(),
            window_days: result.window_days,
            fold,
            thresholds,
            raw_columns: result.raw_columns.clone(),
            standardizer: fm.standardizer.clone(),
            autoencoder: fm.autoencoder.clone(),
            gbm: fm.gbm.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelIoError> {
        let json = serde_json::to_vec_pretty(self).expect("bundle serializes");
        std::fs::write(path, json).map_err(|e| ModelIoError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<ModelBundle, ModelIoError> {
        let bytes = std::fs::read(path).map_err(|e| ModelIoError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let bundle: ModelBundle =
            serde_json::from_slice(&bytes).map_err(|e| ModelIoError::Format {
                path: path.to_path_buf(),
                source: e,
            })?;
        if bundle.version != BUNDLE_VERSION {
            return Err(ModelIoError::Version {
                found: bundle.version,
                expected: BUNDLE_VERSION,
            });
        }
        Ok(bundle)
    }

    fn as_fold_model(&self) -> FoldModel {
        FoldModel {
            fold: self.fold,
            standardizer: self.standardizer.clone(),
            autoencoder: self.autoencoder.clone(),
            gbm: self.gbm.clone(),
        }
    }

    /// Predict from a raw feature row in `raw_columns` order.
    pub fn predict_raw_row(&self, row: &[f64]) -> Result<f64, PipelineError> {
        self.as_fold_model().predict_raw_row(&self.raw_columns, row)
    }

    /// Predict from named feature values; any missing column is an error
    /// listing everything the model needs.
    pub fn predict_named(
        &self,
        features: &BTreeMap<String, f64>,
    ) -> Result<(f64, IrClass), PipelineError> {
        let missing: Vec<String> = self
            .raw_columns
            .iter()
            .filter(|c| !features.contains_key(*c))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::MissingColumns { columns: missing });
        }
        let row: Vec<f64> = self.raw_columns.iter().map(|c| features[c]).collect();
        let y = self.predict_raw_row(&row)?;
        let class = classify_value(y, &self.thresholds)?;
        Ok((y, class))
    }
}

/// Apply a frozen model to new cohort records: the stored standardizer is
/// never refit. Records missing any required column are reported by id.
pub fn predict_and_classify(
    bundle: &ModelBundle,
    records: &[ParticipantRecord],
) -> Result<PredictionSet, PipelineError> {
    let mut out = PredictionSet::default();
    for record in records {
        let window = AggregationWindow::custom(bundle.window_days, record.labs.draw_date);
        let aggregates = aggregate_available(&record.days, &window);
        let mut row = Vec::with_capacity(bundle.raw_columns.len());
        let mut missing = Vec::new();
        for column in &bundle.raw_columns {
            match crate::featureset::column_value(record, &aggregates, column)? {
                Some(v) if v.is_finite() => row.push(v),
                _ => missing.push(column.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(PipelineError::MissingColumns { columns: missing });
        }
        let y_pred = bundle.predict_raw_row(&row)?;
        let y_true = record
            .homa_ir()
            .map(|h| h.value())
            .unwrap_or(f64::NAN);
        let class_true = if y_true.is_finite() {
            classify_value(y_true, &bundle.thresholds)?
        } else {
            IrClass::InsulinSensitive
        };
        out.records.push(PredictionRecord {
            id: record.id.clone(),
            y_true,
            y_pred,
            fold: bundle.fold,
            class_true,
            class_pred: classify_value(y_pred, &bundle.thresholds)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::IrThresholds;
    use crate::featureset::feature_set_by_name;
    use crate::pipeline::{run_experiment, ExperimentSpec, ModelScheme};
    use crate::synthcohort::{generate_functional_cohort, FunctionalSpec};

    fn trained_bundle(dir: &Path) -> (ModelBundle, Vec<ParticipantRecord>) {
        let (files, _, _) =
            generate_functional_cohort(60, &FunctionalSpec::default(), 4, dir).unwrap();
        let records = crate::ingest::load_cohort(&files).unwrap();
        let fs = feature_set_by_name("wearables_demographics_glucose").unwrap();
        let mut spec = ExperimentSpec::new("bundle-test", fs, ModelScheme::TreeDirect);
        spec.gbm.n_estimators = 15;
        let result = run_experiment(&records, &spec).unwrap();
        (
            ModelBundle::from_fold(&result, 0, IrThresholds::default()),
            records,
        )
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (bundle, _) = trained_bundle(dir.path());
        let path = dir.path().join("model.json");
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert_eq!(bundle, loaded);
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut bundle, _) = trained_bundle(dir.path());
        bundle.version = 99;
        let path = dir.path().join("model.json");
        bundle.save(&path).unwrap();
        assert!(matches!(
            ModelBundle::load(&path),
            Err(ModelIoError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn predict_named_lists_missing_columns() {
        let dir = tempfile::tempdir().unwrap();
        let (bundle, _) = trained_bundle(dir.path());
        let features = BTreeMap::from([("age".to_string(), 45.0)]);
        match bundle.predict_named(&features) {
            Err(PipelineError::MissingColumns { columns }) => {
                assert!(columns.contains(&"glucose".to_string()));
                assert!(columns.contains(&"rhr_mean".to_string()));
            }
            other => panic!("expected missing columns, got {other:?}"),
        }
    }

    #[test]
    fn frozen_prediction_matches_fold_model() {
        let dir = tempfile::tempdir().unwrap();
        let (bundle, records) = trained_bundle(dir.path());
        // applying the frozen model to the same records is pure
        let a = predict_and_classify(&bundle, &records).unwrap();
        let b = predict_and_classify(&bundle, &records).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), records.len());
    }

    #[test]
    fn missing_glucose_under_glucose_model_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (bundle, mut records) = trained_bundle(dir.path());
        records[0].labs.glucose = None;
        match predict_and_classify(&bundle, &records[..1]) {
            Err(PipelineError::MissingColumns { columns }) => {
                assert_eq!(columns, vec!["glucose".to_string()]);
            }
            other => panic!("expected missing glucose, got {other:?}"),
        }
    }
}
