//! Rolling-window wearable aggregation, feature-set expansion, and
//! fold-scoped standardization.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ParticipantRecord;
use crate::metrics::{median, population_std};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("no in-window data for metric '{metric}'")]
    MissingFeature { metric: String },
    #[error("design matrix is empty after feature requirements")]
    EmptyDesign,
    #[error("unknown feature column '{column}'")]
    UnknownColumn { column: String },
    #[error("unknown feature set '{name}'")]
    UnknownFeatureSet { name: String },
    #[error("window length {n_days} is not one of the standard lengths")]
    NonStandardWindow { n_days: u32 },
    #[error("cannot fit standardizer on an empty training set")]
    EmptyTrainingSet,
    #[error("feature set must include at least one panel")]
    EmptyFeatureSet,
}

/// Standard aggregation lengths in days.
pub const STANDARD_WINDOWS: [u32; 6] = [7, 14, 30, 60, 90, 120];

/// Core wearable metrics modeled as window summaries.
pub const CORE_WEARABLE_METRICS: [&str; 4] = ["rhr", "hrv_rmssd", "steps", "sleep_minutes"];

/// Summary statistics computed per metric, in column order.
pub const WEARABLE_STATS: [&str; 3] = ["mean", "std", "median"];

/// Default comprehensive-metabolic-panel analytes (beyond glucose).
pub const DEFAULT_METABOLIC_ANALYTES: [&str; 8] = [
    "albumin_globulin_ratio",
    "creatinine",
    "egfr",
    "bun",
    "sodium",
    "potassium",
    "chloride",
    "crp",
];

/// Half-open aggregation window `[anchor - n_days, anchor)`: the anchor
/// day itself (typically the blood draw) is excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationWindow {
    pub n_days: u32,
    pub anchor: NaiveDate,
}

impl AggregationWindow {
    pub fn standard(n_days: u32, anchor: NaiveDate) -> Result<Self, FeatureError> {
        if STANDARD_WINDOWS.contains(&n_days) {
            Ok(AggregationWindow { n_days, anchor })
        } else {
            Err(FeatureError::NonStandardWindow { n_days })
        }
    }

    /// Any positive length; for sweeps and config overrides.
    pub fn custom(n_days: u32, anchor: NaiveDate) -> Self {
        AggregationWindow { n_days, anchor }
    }

    pub fn start(&self) -> NaiveDate {
        self.anchor - Duration::days(self.n_days as i64)
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start() && date < self.anchor
    }
}

/// Feature panels. Expansion order is fixed to this declaration order so
/// column lists are deterministic regardless of configuration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    Wearables,
    Demographics,
    FastingGlucose,
    LipidPanel,
    MetabolicPanel,
    HbA1c,
    Hypertension,
}

impl Panel {
    pub const ALL: [Panel; 7] = [
        Panel::Wearables,
        Panel::Demographics,
        Panel::FastingGlucose,
        Panel::LipidPanel,
        Panel::MetabolicPanel,
        Panel::HbA1c,
        Panel::Hypertension,
    ];
}

/// Analyte names used when expanding the metabolic panel. The
/// comprehensive metabolic panel includes fasting glucose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelCatalog {
    pub metabolic_analytes: Vec<String>,
}

impl Default for PanelCatalog {
    fn default() -> Self {
        PanelCatalog {
            metabolic_analytes: DEFAULT_METABOLIC_ANALYTES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// A named subset of panels defining one experiment's inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetSpec {
    pub name: String,
    pub panels: Vec<Panel>,
}

impl FeatureSetSpec {
    pub fn new(name: &str, panels: &[Panel]) -> Self {
        FeatureSetSpec {
            name: name.to_string(),
            panels: panels.to_vec(),
        }
    }

    /// Ordered, de-duplicated column list: canonical panel order, then
    /// metric order within each panel.
    pub fn columns(&self, catalog: &PanelCatalog) -> Result<Vec<String>, FeatureError> {
        if self.panels.is_empty() {
            return Err(FeatureError::EmptyFeatureSet);
        }
        let mut cols: Vec<String> = Vec::new();
        let push = |cols: &mut Vec<String>, c: String| {
            if !cols.contains(&c) {
                cols.push(c);
            }
        };
        for panel in Panel::ALL {
            if !self.panels.contains(&panel) {
                continue;
            }
            match panel {
                Panel::Wearables => {
                    for metric in CORE_WEARABLE_METRICS {
                        for stat in WEARABLE_STATS {
                            push(&mut cols, format!("{metric}_{stat}"));
                        }
                    }
                }
                Panel::Demographics => {
                    push(&mut cols, "age".into());
                    push(&mut cols, "bmi".into());
                }
                Panel::FastingGlucose => push(&mut cols, "glucose".into()),
                Panel::LipidPanel => {
                    for c in ["hdl", "ldl", "triglycerides", "total_cholesterol"] {
                        push(&mut cols, c.into());
                    }
                }
                Panel::MetabolicPanel => {
                    push(&mut cols, "glucose".into());
                    for a in &catalog.metabolic_analytes {
                        push(&mut cols, a.clone());
                    }
                }
                Panel::HbA1c => push(&mut cols, "hba1c".into()),
                Panel::Hypertension => push(&mut cols, "hypertension".into()),
            }
        }
        Ok(cols)
    }
}

/// The feature sets reported in the ablation figures. Arbitrary panel
/// subsets remain expressible through configuration.
pub fn named_feature_sets() -> Vec<FeatureSetSpec> {
    use Panel::*;
    vec![
        FeatureSetSpec::new("demographics", &[Demographics]),
        FeatureSetSpec::new("wearables", &[Wearables]),
        FeatureSetSpec::new("glucose", &[FastingGlucose]),
        FeatureSetSpec::new("lipid_panel", &[LipidPanel]),
        FeatureSetSpec::new("demographics_glucose", &[Demographics, FastingGlucose]),
        FeatureSetSpec::new("wearables_demographics", &[Wearables, Demographics]),
        FeatureSetSpec::new(
            "wearables_demographics_glucose",
            &[Wearables, Demographics, FastingGlucose],
        ),
        FeatureSetSpec::new(
            "wearables_demographics_lipid",
            &[Wearables, Demographics, LipidPanel],
        ),
        FeatureSetSpec::new(
            "wearables_demographics_lipid_metabolic",
            &[Wearables, Demographics, LipidPanel, MetabolicPanel],
        ),
    ]
}

pub fn feature_set_by_name(name: &str) -> Result<FeatureSetSpec, FeatureError> {
    named_feature_sets()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| FeatureError::UnknownFeatureSet {
            name: name.to_string(),
        })
}

/// Window summary of one metric: mean, population standard deviation,
/// and median over non-missing in-window days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n_days: usize,
}

fn summarize(values: &[f64]) -> Option<AggregateStats> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Some(AggregateStats {
        mean,
        std: population_std(values),
        median: median(values).expect("non-empty"),
        n_days: values.len(),
    })
}

/// Aggregate every available metric (core metrics and extras) over the
/// window. Metrics with zero in-window days are absent from the map.
pub fn aggregate_available(
    days: &[crate::domain::WearableDaily],
    window: &AggregationWindow,
) -> BTreeMap<String, AggregateStats> {
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for day in days {
        if !window.contains(day.date) {
            continue;
        }
        for (name, value) in [
            ("rhr", day.rhr),
            ("hrv_rmssd", day.hrv_rmssd),
            ("steps", day.steps),
            ("sleep_minutes", day.sleep_minutes),
        ] {
            if let Some(v) = value {
                per_metric.entry(name.to_string()).or_default().push(v);
            }
        }
        for (name, v) in &day.extras {
            per_metric.entry(name.clone()).or_default().push(*v);
        }
    }
    per_metric
        .into_iter()
        .filter_map(|(k, vs)| summarize(&vs).map(|s| (k, s)))
        .collect()
}

/// Aggregate the given metrics over the window, erroring on any metric
/// with no in-window data.
pub fn aggregate_wearables_window(
    days: &[crate::domain::WearableDaily],
    window: &AggregationWindow,
    required_metrics: &[&str],
) -> Result<BTreeMap<String, AggregateStats>, FeatureError> {
    let available = aggregate_available(days, window);
    for metric in required_metrics {
        if !available.contains_key(*metric) {
            return Err(FeatureError::MissingFeature {
                metric: metric.to_string(),
            });
        }
    }
    Ok(available)
}

/// Value of one named feature column for a record, given precomputed
/// window aggregates. `Ok(None)` means the subject lacks the feature.
pub fn column_value(
    record: &ParticipantRecord,
    aggregates: &BTreeMap<String, AggregateStats>,
    column: &str,
) -> Result<Option<f64>, FeatureError> {
    let labs = &record.labs;
    let value = match column {
        "age" => Some(record.demographics.age),
        "bmi" => record.demographics.effective_bmi(),
        "hypertension" => Some(if record.demographics.hypertension {
            1.0
        } else {
            0.0
        }),
        "glucose" => labs.glucose,
        "hba1c" => labs.hba1c,
        "hdl" => labs.hdl,
        "ldl" => labs.ldl,
        "triglycerides" => labs.triglycerides,
        "total_cholesterol" => labs.total_cholesterol,
        other => {
            if let Some((metric, stat)) = parse_wearable_column(other) {
                aggregates.get(metric).map(|s| match stat {
                    "mean" => s.mean,
                    "std" => s.std,
                    _ => s.median,
                })
            } else if labs.metabolic.contains_key(other) {
                labs.metabolic.get(other).copied()
            } else if known_analyte_shape(other) {
                None
            } else {
                return Err(FeatureError::UnknownColumn {
                    column: other.to_string(),
                });
            }
        }
    };
    Ok(value)
}

fn parse_wearable_column(column: &str) -> Option<(&str, &'static str)> {
    for stat in WEARABLE_STATS {
        let suffix = format!("_{stat}");
        if let Some(metric) = column.strip_suffix(suffix.as_str()) {
            if !metric.is_empty() {
                return Some((metric, stat));
            }
        }
    }
    None
}

// A lab analyte absent from this subject's panel map is a missing value,
// not an unknown column, as long as it looks like an analyte name.
fn known_analyte_shape(column: &str) -> bool {
    column
        .chars()
        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Feature rows with HOMA-IR targets for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn has_nan(&self) -> bool {
        self.rows.iter().flatten().any(|v| !v.is_finite())
            || self.targets.iter().any(|v| !v.is_finite())
    }

    pub fn select_rows(&self, idx: &[usize]) -> DesignMatrix {
        DesignMatrix {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            columns: self.columns.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Unstandardized design matrix for a feature set and window length. The
/// window anchors at each subject's blood-draw date. Subjects missing any
/// required column are omitted. Insulin is never a feature.
pub fn build_design_matrix(
    records: &[ParticipantRecord],
    spec: &FeatureSetSpec,
    window_days: u32,
    catalog: &PanelCatalog,
) -> Result<DesignMatrix, FeatureError> {
    let columns = spec.columns(catalog)?;
    debug_assert!(columns.iter().all(|c| c != "insulin"));
    let mut matrix = DesignMatrix {
        ids: Vec::new(),
        columns: columns.clone(),
        rows: Vec::new(),
        targets: Vec::new(),
    };
    for record in records {
        let target = match record.homa_ir() {
            Some(h) => h.value(),
            None => continue,
        };
        let window = AggregationWindow::custom(window_days, record.labs.draw_date);
        let aggregates = aggregate_available(&record.days, &window);
        let mut row = Vec::with_capacity(columns.len());
        let mut complete = true;
        for column in &columns {
            match column_value(record, &aggregates, column)? {
                Some(v) if v.is_finite() => row.push(v),
                _ => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            matrix.ids.push(record.id.clone());
            matrix.rows.push(row);
            matrix.targets.push(target);
        }
    }
    if matrix.rows.is_empty() {
        return Err(FeatureError::EmptyDesign);
    }
    Ok(matrix)
}

/// Per-column location/scale fitted on a training subset. Zero-variance
/// columns are dropped and recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizerParams {
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub dropped: Vec<String>,
}

const ZERO_VARIANCE_EPS: f64 = 1e-12;

pub fn fit_standardizer(
    rows: &[Vec<f64>],
    columns: &[String],
) -> Result<StandardizerParams, FeatureError> {
    if rows.is_empty() {
        return Err(FeatureError::EmptyTrainingSet);
    }
    let n = rows.len() as f64;
    let mut params = StandardizerParams {
        columns: Vec::new(),
        means: Vec::new(),
        stds: Vec::new(),
        dropped: Vec::new(),
    };
    for (j, name) in columns.iter().enumerate() {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= ZERO_VARIANCE_EPS {
            log::warn!("dropping zero-variance column '{name}'");
            params.dropped.push(name.clone());
        } else {
            params.columns.push(name.clone());
            params.means.push(mean);
            params.stds.push(std);
        }
    }
    Ok(params)
}

/// Standardize a matrix with previously fitted params. Output keeps only
/// the retained columns, in the fitted order.
pub fn apply_standardizer(params: &StandardizerParams, matrix: &DesignMatrix) -> DesignMatrix {
    let col_idx: Vec<usize> = params
        .columns
        .iter()
        .map(|c| {
            matrix
                .columns
                .iter()
                .position(|m| m == c)
                .expect("standardizer column present in matrix")
        })
        .collect();
    let rows = matrix
        .rows
        .iter()
        .map(|r| {
            col_idx
                .iter()
                .enumerate()
                .map(|(k, &j)| (r[j] - params.means[k]) / params.stds[k])
                .collect()
        })
        .collect();
    DesignMatrix {
        ids: matrix.ids.clone(),
        columns: params.columns.clone(),
        rows,
        targets: matrix.targets.clone(),
    }
}

/// Standardize a single raw row laid out in `raw_columns` order.
pub fn apply_standardizer_row(
    params: &StandardizerParams,
    raw_columns: &[String],
    row: &[f64],
) -> Result<Vec<f64>, FeatureError> {
    params
        .columns
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let j = raw_columns.iter().position(|m| m == c).ok_or_else(|| {
                FeatureError::UnknownColumn {
                    column: c.to_string(),
                }
            })?;
            Ok((row[j] - params.means[k]) / params.stds[k])
        })
        .collect()
}
