//! Deterministic output writing. Every artifact here is byte-identical
//! across reruns with the same config and seeds; wall-clock metadata is
//! confined to `run_meta.json`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::explain::{ImportanceSummary, ShapVector};
use crate::ingest::QcReport;
use crate::metrics::MetricSummary;
use crate::model_io::ModelBundle;
use crate::pipeline::{ExperimentResult, GridCell, PairwiseComparison};
use crate::robustness::{ConsistencyReport, WindowSweep};

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fixed directory layout under one output root.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: &Path) -> Self {
        OutputLayout {
            root: root.to_path_buf(),
        }
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn curves_dir(&self) -> PathBuf {
        self.root.join("curves")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn shap_dir(&self) -> PathBuf {
        self.root.join("shap")
    }

    pub fn robustness_dir(&self) -> PathBuf {
        self.root.join("robustness")
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.root.join("embeddings")
    }

    pub fn ensure(&self, dir: &Path) -> Result<(), ArtifactError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable artifact");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<(), ArtifactError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    writeln!(file, "{header}").map_err(io_err(path))?;
    for row in rows {
        writeln!(file, "{}", row.join(",")).map_err(io_err(path))?;
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Report JSON, pooled predictions CSV, pooled ROC/PR curve CSV, and one
/// model bundle per fold.
pub fn write_experiment_outputs(
    layout: &OutputLayout,
    result: &ExperimentResult,
    thresholds: crate::domain::IrThresholds,
) -> Result<(), ArtifactError> {
    layout.ensure(&layout.reports_dir())?;
    layout.ensure(&layout.predictions_dir())?;
    layout.ensure(&layout.curves_dir())?;
    let model_dir = layout.models_dir().join(&result.name);
    layout.ensure(&model_dir)?;

    #[derive(Serialize)]
    struct ReportDoc<'a> {
        name: &'a str,
        feature_set: &'a str,
        window_days: u32,
        scheme: &'a str,
        cv: &'a str,
        n: usize,
        evaluation: &'a crate::metrics::EvaluationReport,
    }
    write_json(
        &layout.reports_dir().join(format!("{}.report.json", result.name)),
        &ReportDoc {
            name: &result.name,
            feature_set: &result.feature_set,
            window_days: result.window_days,
            scheme: &result.scheme,
            cv: &result.cv,
            n: result.predictions.len(),
            evaluation: &result.evaluation,
        },
    )?;

    let rows: Vec<Vec<String>> = result
        .predictions
        .records
        .iter()
        .map(|p| {
            vec![
                p.id.clone(),
                fmt(p.y_true),
                fmt(p.y_pred),
                p.fold.to_string(),
                p.class_true.label().to_string(),
                p.class_pred.label().to_string(),
            ]
        })
        .collect();
    write_csv(
        &layout
            .predictions_dir()
            .join(format!("{}.predictions.csv", result.name)),
        "id,y_true,y_pred,fold,class_true,class_pred",
        &rows,
    )?;

    let mut curve_rows = Vec::new();
    for (x, y) in &result.evaluation.roc_curve {
        curve_rows.push(vec!["roc".to_string(), fmt(*x), fmt(*y)]);
    }
    for (x, y) in &result.evaluation.pr_curve {
        curve_rows.push(vec!["pr".to_string(), fmt(*x), fmt(*y)]);
    }
    write_csv(
        &layout.curves_dir().join(format!("{}.curves.csv", result.name)),
        "curve,x,y",
        &curve_rows,
    )?;

    for fold in 0..result.fold_models.len() {
        let bundle = ModelBundle::from_fold(result, fold, thresholds);
        bundle
            .save(&model_dir.join(format!("fold{fold}.model.json")))
            .map_err(|e| match e {
                crate::model_io::ModelIoError::Io { path, source } => {
                    ArtifactError::Io { path, source }
                }
                other => ArtifactError::Io {
                    path: model_dir.clone(),
                    source: std::io::Error::other(other.to_string()),
                },
            })?;
    }
    Ok(())
}

/// One summary row per grid cell (failures carry their error text).
#[derive(Debug, Serialize)]
pub struct GridSummaryRow {
    pub name: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold_summary: Option<std::collections::BTreeMap<String, MetricSummary>>,
}

pub fn write_grid_summary(
    layout: &OutputLayout,
    cells: &[GridCell],
) -> Result<(), ArtifactError> {
    layout.ensure(&layout.reports_dir())?;
    let rows: Vec<GridSummaryRow> = cells
        .iter()
        .map(|cell| match &cell.outcome {
            Ok(result) => GridSummaryRow {
                name: cell.name.clone(),
                ok: true,
                error: None,
                n: Some(result.predictions.len()),
                pooled_r2: result.evaluation.pooled_regression.r2,
                pooled_auroc: result.evaluation.pooled_auroc,
                fold_summary: Some(result.evaluation.fold_summary.clone()),
            },
            Err(e) => GridSummaryRow {
                name: cell.name.clone(),
                ok: false,
                error: Some(e.clone()),
                n: None,
                pooled_r2: None,
                pooled_auroc: None,
                fold_summary: None,
            },
        })
        .collect();
    write_json(&layout.reports_dir().join("summary.json"), &rows)
}

/// Pairwise comparisons with Benjamini-Hochberg adjustment within each
/// metric family.
#[derive(Debug, Serialize)]
pub struct AdjustedComparison {
    #[serde(flatten)]
    pub comparison: PairwiseComparison,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wilcoxon_p_adjusted: Option<f64>,
}

pub fn write_grid_comparisons(
    layout: &OutputLayout,
    cells: &[GridCell],
) -> Result<(), ArtifactError> {
    layout.ensure(&layout.reports_dir())?;
    let ok_cells: Vec<&ExperimentResult> = cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|b| b.as_ref()))
        .collect();
    let mut comparisons = Vec::new();
    for i in 0..ok_cells.len() {
        for j in (i + 1)..ok_cells.len() {
            comparisons.extend(crate::pipeline::compare_cells(ok_cells[i], ok_cells[j]));
        }
    }
    // adjust Wilcoxon p-values within each metric family
    let mut adjusted: Vec<Option<f64>> = vec![None; comparisons.len()];
    for metric in ["auroc", "sensitivity", "specificity", "r2"] {
        let idx: Vec<usize> = comparisons
            .iter()
            .enumerate()
            .filter(|(_, c)| c.metric == metric && c.wilcoxon_p.is_some())
            .map(|(i, _)| i)
            .collect();
        let ps: Vec<f64> = idx
            .iter()
            .map(|&i| comparisons[i].wilcoxon_p.unwrap())
            .collect();
        if let Ok(adj) = crate::stats::benjamini_hochberg(&ps) {
            for (k, &i) in idx.iter().enumerate() {
                adjusted[i] = Some(adj[k]);
            }
        }
    }
    let rows: Vec<AdjustedComparison> = comparisons
        .into_iter()
        .zip(adjusted)
        .map(|(comparison, wilcoxon_p_adjusted)| AdjustedComparison {
            comparison,
            wilcoxon_p_adjusted,
        })
        .collect();
    write_json(&layout.reports_dir().join("comparisons.json"), &rows)
}

pub fn write_qc_report(layout: &OutputLayout, report: &QcReport) -> Result<(), ArtifactError> {
    layout.ensure(&layout.root)?;
    write_json(&layout.root.join("qc_report.json"), report)
}

/// Sweep CSV (id, window_end, y_pred, class_pred) and the consistency
/// buckets JSON for one experiment and window length.
pub fn write_robustness_outputs(
    layout: &OutputLayout,
    experiment: &str,
    window_days: u32,
    sweeps: &[WindowSweep],
    report: &ConsistencyReport,
    cvs: &[(String, f64)],
) -> Result<(), ArtifactError> {
    layout.ensure(&layout.robustness_dir())?;
    let mut rows = Vec::new();
    for sweep in sweeps {
        for entry in &sweep.entries {
            rows.push(vec![
                sweep.id.clone(),
                entry.window_end.to_string(),
                fmt(entry.y_pred),
                entry.class_pred.label().to_string(),
            ]);
        }
    }
    write_csv(
        &layout
            .robustness_dir()
            .join(format!("{experiment}.w{window_days}.sweep.csv")),
        "id,window_end,y_pred,class_pred",
        &rows,
    )?;
    write_json(
        &layout
            .robustness_dir()
            .join(format!("{experiment}.w{window_days}.buckets.json")),
        report,
    )?;
    let cv_rows: Vec<Vec<String>> = cvs
        .iter()
        .map(|(id, cv)| vec![id.clone(), fmt(*cv)])
        .collect();
    write_csv(
        &layout
            .robustness_dir()
            .join(format!("{experiment}.w{window_days}.cv.csv")),
        "id,cv_percent",
        &cv_rows,
    )
}

/// Importance CSV, the per-row SHAP matrix, and Sankey-ready
/// (model, feature, weight) triples.
pub fn write_importance_outputs(
    layout: &OutputLayout,
    experiment: &str,
    importance: &ImportanceSummary,
    per_row: &[(String, ShapVector)],
) -> Result<(), ArtifactError> {
    layout.ensure(&layout.shap_dir())?;
    let rows: Vec<Vec<String>> = importance
        .ranking
        .iter()
        .map(|&i| {
            vec![
                importance.columns[i].clone(),
                fmt(importance.mean_abs_shap[i]),
            ]
        })
        .collect();
    write_csv(
        &layout
            .shap_dir()
            .join(format!("{experiment}.importance.csv")),
        "feature,mean_abs_shap",
        &rows,
    )?;

    #[derive(Serialize)]
    struct SankeyEdge<'a> {
        model: &'a str,
        feature: &'a str,
        weight: f64,
    }
    let edges: Vec<SankeyEdge> = importance
        .ranking
        .iter()
        .map(|&i| SankeyEdge {
            model: experiment,
            feature: &importance.columns[i],
            weight: importance.mean_abs_shap[i],
        })
        .collect();
    write_json(
        &layout.shap_dir().join(format!("{experiment}.sankey.json")),
        &edges,
    )?;

    let mut shap_rows = Vec::new();
    for (id, shap) in per_row {
        let mut row = vec![id.clone(), fmt(shap.base_value)];
        row.extend(shap.values.iter().map(|v| fmt(*v)));
        shap_rows.push(row);
    }
    let width = per_row.first().map(|(_, s)| s.values.len()).unwrap_or(0);
    let header = std::iter::once("id".to_string())
        .chain(std::iter::once("base_value".to_string()))
        .chain((0..width).map(|i| format!("phi_{i}")))
        .collect::<Vec<_>>()
        .join(",");
    write_csv(
        &layout.shap_dir().join(format!("{experiment}.shap.csv")),
        &header,
        &shap_rows,
    )
}

/// Embeddings CSV for external visualization.
pub fn write_embeddings(
    layout: &OutputLayout,
    experiment: &str,
    embeddings: &[(String, Vec<f64>)],
) -> Result<(), ArtifactError> {
    layout.ensure(&layout.embeddings_dir())?;
    let width = embeddings.first().map(|(_, z)| z.len()).unwrap_or(0);
    let header = std::iter::once("id".to_string())
        .chain((0..width).map(|i| format!("z{i}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<Vec<String>> = embeddings
        .iter()
        .map(|(id, z)| {
            std::iter::once(id.clone())
                .chain(z.iter().map(|v| fmt(*v)))
                .collect()
        })
        .collect();
    write_csv(
        &layout
            .embeddings_dir()
            .join(format!("{experiment}.embeddings.csv")),
        &header,
        &rows,
    )
}

/// Wall-clock metadata; the one artifact allowed to differ across reruns.
#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

pub fn write_run_meta(layout: &OutputLayout, meta: &RunMeta) -> Result<(), ArtifactError> {
    layout.ensure(&layout.root)?;
    write_json(&layout.root.join("run_meta.json"), meta)
}
