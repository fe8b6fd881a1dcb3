//! Time-window robustness: rolling-window re-prediction per individual,
//! per-individual coefficient of variation, and consistency bucketing.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{classify_value, IrClass, ParticipantRecord};
use crate::featureset::{aggregate_available, column_value, AggregationWindow};
use crate::metrics::coefficient_of_variation;
use crate::model_io::ModelBundle;
use crate::pipeline::PipelineError;

/// Sweep window lengths; 90 and 120 days would yield at most one or two
/// windows over a typical study span and are excluded by default.
pub const SWEEP_WINDOWS: [u32; 4] = [7, 14, 30, 60];

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("participant '{id}' is absent from the true-class table")]
    UnknownParticipant { id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    /// Exclusive end of the window: the window covers the `n` days
    /// before this date.
    pub window_end: NaiveDate,
    pub y_pred: f64,
    pub class_pred: IrClass,
}

/// All rolling-window predictions for one participant under one window
/// length. `insufficient_span` marks participants whose observed span is
/// shorter than one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSweep {
    pub id: String,
    pub window_days: u32,
    pub entries: Vec<SweepEntry>,
    pub insufficient_span: bool,
}

/// Contiguous non-overlapping windows tiled backward from the last
/// observed wearable day. Constant features (demographics, labs) are
/// reused; wearable features re-aggregate per window. Windows missing a
/// required wearable metric are skipped.
pub fn rolling_window_predictions(
    record: &ParticipantRecord,
    bundle: &ModelBundle,
    window_days: u32,
) -> Result<WindowSweep, RobustnessError> {
    rolling_window_predictions_with_stride(record, bundle, window_days, window_days)
}

/// Overlapping-stride variant for sensitivity checks; the default stride
/// equals the window length (contiguous tiles).
pub fn rolling_window_predictions_with_stride(
    record: &ParticipantRecord,
    bundle: &ModelBundle,
    window_days: u32,
    stride_days: u32,
) -> Result<WindowSweep, RobustnessError> {
    let mut sweep = WindowSweep {
        id: record.id.clone(),
        window_days,
        entries: Vec::new(),
        insufficient_span: false,
    };
    let (first, last) = match (
        record.days.iter().map(|d| d.date).min(),
        record.days.iter().map(|d| d.date).max(),
    ) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            sweep.insufficient_span = true;
            return Ok(sweep);
        }
    };
    let span = (last - first).num_days() + 1;
    if span < window_days as i64 {
        sweep.insufficient_span = true;
        return Ok(sweep);
    }
    let stride = stride_days.max(1) as i64;
    // anchors are exclusive ends; the latest window covers the final
    // `window_days` observed days
    let mut anchor = last + chrono::Duration::days(1);
    while (anchor - chrono::Duration::days(window_days as i64)) >= first {
        let window = AggregationWindow::custom(window_days, anchor);
        let aggregates = aggregate_available(&record.days, &window);
        let mut row = Vec::with_capacity(bundle.raw_columns.len());
        let mut complete = true;
        for column in &bundle.raw_columns {
            match column_value(record, &aggregates, column).map_err(PipelineError::from)? {
                Some(v) if v.is_finite() => row.push(v),
                _ => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            let y_pred = bundle.predict_raw_row(&row)?;
            sweep.entries.push(SweepEntry {
                window_end: anchor,
                y_pred,
                class_pred: classify_value(y_pred, &bundle.thresholds)
                    .map_err(PipelineError::from)?,
            });
        }
        anchor -= chrono::Duration::days(stride);
    }
    sweep.entries.reverse();
    Ok(sweep)
}

/// Coefficient of variation (percent) of the sweep's predictions;
/// undefined below two windows.
pub fn per_individual_cv(sweep: &WindowSweep) -> Option<f64> {
    if sweep.entries.len() < 2 {
        return None;
    }
    let values: Vec<f64> = sweep.entries.iter().map(|e| e.y_pred).collect();
    coefficient_of_variation(&values)
}

/// Fractions of participants per agreement-with-majority band.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyBuckets {
    /// exactly 100% agreement
    pub full: f64,
    /// 75% - 99.9%
    pub high: f64,
    /// 50% - 74.9%
    pub medium: f64,
    /// below 50%
    pub low: f64,
}

impl ConsistencyBuckets {
    pub fn sum(&self) -> f64 {
        self.full + self.high + self.medium + self.low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantConsistency {
    pub id: String,
    pub n_windows: usize,
    /// Fraction of windows agreeing with the majority binary label.
    pub consistency: f64,
    pub majority_is_ir: bool,
    pub true_is_ir: bool,
}

/// Consistency summary across participants: stability buckets plus the
/// stricter stable-and-correct variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub window_days: u32,
    pub n_participants: usize,
    pub buckets: ConsistencyBuckets,
    /// Fraction with 100% agreement whose majority label also matches
    /// the true label.
    pub consistent_and_correct: f64,
    pub per_participant: Vec<ParticipantConsistency>,
}

/// Bucket each participant by the fraction of windows agreeing with
/// their majority predicted binary label (IR vs non-IR). Ties on an even
/// window count break toward non-IR.
pub fn consistency_report(
    sweeps: &[WindowSweep],
    true_classes: &BTreeMap<String, IrClass>,
) -> Result<ConsistencyReport, RobustnessError> {
    let mut per_participant = Vec::new();
    let mut buckets = ConsistencyBuckets::default();
    let mut consistent_correct = 0usize;
    let window_days = sweeps.first().map(|s| s.window_days).unwrap_or(0);
    for sweep in sweeps {
        if sweep.entries.is_empty() {
            continue;
        }
        let true_class = true_classes
            .get(&sweep.id)
            .ok_or_else(|| RobustnessError::UnknownParticipant {
                id: sweep.id.clone(),
            })?;
        let n = sweep.entries.len();
        let ir_votes = sweep
            .entries
            .iter()
            .filter(|e| e.class_pred.is_ir())
            .count();
        // conservative screening posture: ties resolve to non-IR
        let majority_is_ir = ir_votes * 2 > n;
        let agree = if majority_is_ir { ir_votes } else { n - ir_votes };
        let consistency = agree as f64 / n as f64;
        if consistency >= 1.0 {
            buckets.full += 1.0;
            if majority_is_ir == true_class.is_ir() {
                consistent_correct += 1;
            }
        } else if consistency >= 0.75 {
            buckets.high += 1.0;
        } else if consistency >= 0.5 {
            buckets.medium += 1.0;
        } else {
            buckets.low += 1.0;
        }
        per_participant.push(ParticipantConsistency {
            id: sweep.id.clone(),
            n_windows: n,
            consistency,
            majority_is_ir,
            true_is_ir: true_class.is_ir(),
        });
    }
    let n = per_participant.len();
    if n > 0 {
        buckets.full /= n as f64;
        buckets.high /= n as f64;
        buckets.medium /= n as f64;
        buckets.low /= n as f64;
    }
    Ok(ConsistencyReport {
        window_days,
        n_participants: n,
        buckets,
        consistent_and_correct: if n > 0 {
            consistent_correct as f64 / n as f64
        } else {
            0.0
        },
        per_participant,
    })
}

/// Sweep every participant of a finished experiment with the fold model
/// that held them out, so no sweep prediction comes from a model trained
/// on that participant.
pub fn sweep_experiment(
    records: &[ParticipantRecord],
    result: &crate::pipeline::ExperimentResult,
    thresholds: crate::domain::IrThresholds,
    window_days: u32,
    stride: Option<u32>,
) -> Result<(Vec<WindowSweep>, ConsistencyReport), RobustnessError> {
    let fold_of: BTreeMap<&str, usize> = result
        .predictions
        .records
        .iter()
        .map(|p| (p.id.as_str(), p.fold))
        .collect();
    let bundles: Vec<ModelBundle> = (0..result.fold_models.len())
        .map(|f| ModelBundle::from_fold(result, f, thresholds))
        .collect();
    let mut sweeps = Vec::new();
    let mut truths = BTreeMap::new();
    for record in records {
        let fold = match fold_of.get(record.id.as_str()) {
            Some(&f) => f,
            None => continue,
        };
        let sweep = rolling_window_predictions_with_stride(
            record,
            &bundles[fold],
            window_days,
            stride.unwrap_or(window_days),
        )?;
        if let Some(h) = record.homa_ir() {
            truths.insert(
                record.id.clone(),
                crate::domain::classify_ir(h, &thresholds).map_err(PipelineError::from)?,
            );
        }
        sweeps.push(sweep);
    }
    let report = consistency_report(&sweeps, &truths)?;
    Ok((sweeps, report))
}

/// Per-individual CVs of a sweep collection, skipping participants with
/// fewer than two windows.
pub fn sweep_cvs(sweeps: &[WindowSweep]) -> Vec<(String, f64)> {
    sweeps
        .iter()
        .filter_map(|s| per_individual_cv(s).map(|cv| (s.id.clone(), cv)))
        .collect()
}
