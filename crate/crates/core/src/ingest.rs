//! Cohort file parsing, the per-participant join, and quality-control
//! exclusions.
//!
//! Three CSVs describe a cohort: `participants.csv` (demographics and
//! flags), `wearables.csv` (one row per participant-day), and `labs.csv`
//! (one blood panel per participant). Empty cells are missing values.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BloodPanel, Demographics, ParticipantRecord, WearableDaily};
use crate::featureset::AggregationWindow;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Csv { file: String, source: csv::Error },
    #[error("{file} line {line}: {message}")]
    MalformedRow {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}: missing required column '{column}'")]
    MissingColumn { file: String, column: String },
    #[error("duplicate participant id '{id}' in {file}")]
    DuplicateId { file: String, id: String },
    #[error("{file}: duplicate wearable day ({id}, {date})")]
    DuplicateWearableDay {
        file: String,
        id: String,
        date: NaiveDate,
    },
    #[error("{file}: unknown participant id '{id}'")]
    UnknownParticipant { file: String, id: String },
    #[error("participant '{id}' has no labs row")]
    MissingLabs { id: String },
}

/// The three cohort files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFiles {
    pub participants_path: PathBuf,
    pub wearables_path: PathBuf,
    pub labs_path: PathBuf,
}

impl CohortFiles {
    pub fn in_dir(dir: &Path) -> Self {
        CohortFiles {
            participants_path: dir.join("participants.csv"),
            wearables_path: dir.join("wearables.csv"),
            labs_path: dir.join("labs.csv"),
        }
    }
}

struct Header {
    file: String,
    index: BTreeMap<String, usize>,
}

impl Header {
    fn new(file: &str, headers: &csv::StringRecord) -> Self {
        let index = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        Header {
            file: file.to_string(),
            index,
        }
    }

    fn require(&self, column: &str) -> Result<usize, IngestError> {
        self.index
            .get(column)
            .copied()
            .ok_or_else(|| IngestError::MissingColumn {
                file: self.file.clone(),
                column: column.to_string(),
            })
    }

    /// Columns other than the given known set.
    fn extras(&self, known: &[&str]) -> Vec<(String, usize)> {
        self.index
            .iter()
            .filter(|(name, _)| !known.contains(&name.as_str()))
            .map(|(name, &i)| (name.clone(), i))
            .collect()
    }
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn cell<'a>(record: &'a csv::StringRecord, idx: usize) -> &'a str {
    record.get(idx).unwrap_or("").trim()
}

fn parse_f64(
    record: &csv::StringRecord,
    idx: usize,
    file: &str,
    column: &str,
) -> Result<Option<f64>, IngestError> {
    let raw = cell(record, idx);
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>()
        .map(Some)
        .map_err(|_| IngestError::MalformedRow {
            file: file.to_string(),
            line: line_of(record),
            message: format!("cannot parse '{raw}' as a number for {column}"),
        })
}

fn parse_flag(
    record: &csv::StringRecord,
    idx: usize,
    file: &str,
    column: &str,
) -> Result<bool, IngestError> {
    match cell(record, idx) {
        "1" | "true" => Ok(true),
        "" | "0" | "false" => Ok(false),
        other => Err(IngestError::MalformedRow {
            file: file.to_string(),
            line: line_of(record),
            message: format!("cannot parse '{other}' as a 0/1 flag for {column}"),
        }),
    }
}

fn parse_date(
    record: &csv::StringRecord,
    idx: usize,
    file: &str,
    column: &str,
) -> Result<NaiveDate, IngestError> {
    let raw = cell(record, idx);
    raw.parse::<NaiveDate>()
        .map_err(|_| IngestError::MalformedRow {
            file: file.to_string(),
            line: line_of(record),
            message: format!("cannot parse '{raw}' as an ISO-8601 date for {column}"),
        })
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, IngestError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => IngestError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => IngestError::Csv {
                file: path.display().to_string(),
                source: e,
            },
        })
}

const PARTICIPANT_KNOWN: [&str; 9] = [
    "id",
    "age",
    "gender",
    "ethnicity",
    "height_m",
    "weight_kg",
    "bmi",
    "hypertension",
    "fasting",
];
const WEARABLE_KNOWN: [&str; 6] = ["id", "date", "rhr", "hrv_rmssd", "steps", "sleep_minutes"];
const LAB_KNOWN: [&str; 9] = [
    "id",
    "draw_date",
    "insulin",
    "glucose",
    "hba1c",
    "hdl",
    "ldl",
    "triglycerides",
    "total_cholesterol",
];

/// Parse and join the three cohort files into one record per participant.
/// Wearable days are sorted by date; duplicate participant-days and ids
/// unknown to `participants.csv` are errors.
pub fn load_cohort(files: &CohortFiles) -> Result<Vec<ParticipantRecord>, IngestError> {
    // participants
    let mut reader = open_reader(&files.participants_path)?;
    let file = files.participants_path.display().to_string();
    let header = Header::new(&file, reader.headers().map_err(|e| IngestError::Csv {
        file: file.clone(),
        source: e,
    })?);
    let id_col = header.require("id")?;
    let age_col = header.require("age")?;
    let gender_col = header.require("gender")?;
    let ethnicity_col = header.require("ethnicity")?;
    let height_col = header.require("height_m")?;
    let weight_col = header.require("weight_kg")?;
    let bmi_col = header.index.get("bmi").copied();
    let hypertension_col = header.require("hypertension")?;
    let fasting_col = header.require("fasting")?;
    let comorbidity_cols = header.extras(&PARTICIPANT_KNOWN);

    struct PartialRecord {
        demographics: Demographics,
        fasting: bool,
        days: Vec<WearableDaily>,
        labs: Option<BloodPanel>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, PartialRecord> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Csv {
            file: file.clone(),
            source: e,
        })?;
        let id = cell(&row, id_col).to_string();
        if id.is_empty() {
            return Err(IngestError::MalformedRow {
                file: file.clone(),
                line: line_of(&row),
                message: "empty participant id".into(),
            });
        }
        if by_id.contains_key(&id) {
            return Err(IngestError::DuplicateId {
                file: file.clone(),
                id,
            });
        }
        let age = parse_f64(&row, age_col, &file, "age")?.ok_or_else(|| {
            IngestError::MalformedRow {
                file: file.clone(),
                line: line_of(&row),
                message: "age is required".into(),
            }
        })?;
        let mut comorbidities = BTreeMap::new();
        for (name, idx) in &comorbidity_cols {
            comorbidities.insert(name.clone(), parse_flag(&row, *idx, &file, name)?);
        }
        let demographics = Demographics {
            age,
            gender: cell(&row, gender_col).to_string(),
            ethnicity: cell(&row, ethnicity_col).to_string(),
            height_m: parse_f64(&row, height_col, &file, "height_m")?,
            weight_kg: parse_f64(&row, weight_col, &file, "weight_kg")?,
            bmi: bmi_col.and_then(|c| parse_f64(&row, c, &file, "bmi").transpose()).transpose()?,
            hypertension: parse_flag(&row, hypertension_col, &file, "hypertension")?,
            comorbidities,
        };
        order.push(id.clone());
        by_id.insert(
            id,
            PartialRecord {
                demographics,
                fasting: parse_flag(&row, fasting_col, &file, "fasting")?,
                days: Vec::new(),
                labs: None,
            },
        );
    }

    // wearables
    let mut reader = open_reader(&files.wearables_path)?;
    let file = files.wearables_path.display().to_string();
    let header = Header::new(&file, reader.headers().map_err(|e| IngestError::Csv {
        file: file.clone(),
        source: e,
    })?);
    let id_col = header.require("id")?;
    let date_col = header.require("date")?;
    let rhr_col = header.require("rhr")?;
    let hrv_col = header.require("hrv_rmssd")?;
    let steps_col = header.require("steps")?;
    let sleep_col = header.require("sleep_minutes")?;
    let extra_cols = header.extras(&WEARABLE_KNOWN);
    let mut seen_days: BTreeSet<(String, NaiveDate)> = BTreeSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Csv {
            file: file.clone(),
            source: e,
        })?;
        let id = cell(&row, id_col).to_string();
        let record = by_id
            .get_mut(&id)
            .ok_or_else(|| IngestError::UnknownParticipant {
                file: file.clone(),
                id: id.clone(),
            })?;
        let date = parse_date(&row, date_col, &file, "date")?;
        if !seen_days.insert((id.clone(), date)) {
            return Err(IngestError::DuplicateWearableDay {
                file: file.clone(),
                id,
                date,
            });
        }
        let mut day = WearableDaily::new(date);
        day.rhr = parse_f64(&row, rhr_col, &file, "rhr")?;
        day.hrv_rmssd = parse_f64(&row, hrv_col, &file, "hrv_rmssd")?;
        day.steps = parse_f64(&row, steps_col, &file, "steps")?;
        day.sleep_minutes = parse_f64(&row, sleep_col, &file, "sleep_minutes")?;
        for (name, idx) in &extra_cols {
            if let Some(v) = parse_f64(&row, *idx, &file, name)? {
                day.extras.insert(name.clone(), v);
            }
        }
        record.days.push(day);
    }

    // labs
    let mut reader = open_reader(&files.labs_path)?;
    let file = files.labs_path.display().to_string();
    let header = Header::new(&file, reader.headers().map_err(|e| IngestError::Csv {
        file: file.clone(),
        source: e,
    })?);
    let id_col = header.require("id")?;
    let draw_col = header.require("draw_date")?;
    let insulin_col = header.require("insulin")?;
    let glucose_col = header.require("glucose")?;
    let hba1c_col = header.require("hba1c")?;
    let hdl_col = header.require("hdl")?;
    let ldl_col = header.require("ldl")?;
    let tg_col = header.require("triglycerides")?;
    let tc_col = header.require("total_cholesterol")?;
    let metabolic_cols = header.extras(&LAB_KNOWN);
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Csv {
            file: file.clone(),
            source: e,
        })?;
        let id = cell(&row, id_col).to_string();
        let record = by_id
            .get_mut(&id)
            .ok_or_else(|| IngestError::UnknownParticipant {
                file: file.clone(),
                id: id.clone(),
            })?;
        if record.labs.is_some() {
            return Err(IngestError::DuplicateId {
                file: file.clone(),
                id,
            });
        }
        let mut metabolic = BTreeMap::new();
        for (name, idx) in &metabolic_cols {
            if let Some(v) = parse_f64(&row, *idx, &file, name)? {
                metabolic.insert(name.clone(), v);
            }
        }
        record.labs = Some(BloodPanel {
            draw_date: parse_date(&row, draw_col, &file, "draw_date")?,
            fasting: record.fasting,
            insulin: parse_f64(&row, insulin_col, &file, "insulin")?,
            glucose: parse_f64(&row, glucose_col, &file, "glucose")?,
            hba1c: parse_f64(&row, hba1c_col, &file, "hba1c")?,
            hdl: parse_f64(&row, hdl_col, &file, "hdl")?,
            ldl: parse_f64(&row, ldl_col, &file, "ldl")?,
            triglycerides: parse_f64(&row, tg_col, &file, "triglycerides")?,
            total_cholesterol: parse_f64(&row, tc_col, &file, "total_cholesterol")?,
            metabolic,
        });
    }

    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let partial = by_id.remove(&id).expect("id from order");
        let labs = partial.labs.ok_or(IngestError::MissingLabs { id: id.clone() })?;
        let mut days = partial.days;
        days.sort_by_key(|d| d.date);
        records.push(ParticipantRecord {
            id,
            demographics: partial.demographics,
            days,
            labs,
        });
    }
    Ok(records)
}

/// Quality-control gates, in the order they are checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QcConfig {
    pub require_fasting: bool,
    pub bmi_range: (f64, f64),
    /// HOMA-IR values at or above this are excluded as outliers.
    pub homa_max: f64,
    pub min_wearable_days: usize,
    /// Days are counted inside the longest aggregation window before the
    /// blood draw.
    pub wearable_window_days: u32,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            require_fasting: true,
            bmi_range: (12.0, 65.0),
            homa_max: 15.0,
            min_wearable_days: 14,
            wearable_window_days: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    NotFasting,
    BmiOutOfRange,
    HomaOutlier,
    InsufficientWearableDays,
    MissingRequiredFields,
}

/// Exclusion tallies; the first matching reason is recorded per subject.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QcReport {
    pub input_n: usize,
    pub retained_n: usize,
    pub not_fasting: usize,
    pub bmi_out_of_range: usize,
    pub homa_outlier: usize,
    pub insufficient_wearable_days: usize,
    pub missing_required_fields: usize,
}

impl QcReport {
    pub fn excluded(&self) -> usize {
        self.not_fasting
            + self.bmi_out_of_range
            + self.homa_outlier
            + self.insufficient_wearable_days
            + self.missing_required_fields
    }
}

/// First matching exclusion reason for one record, or `None` to retain.
pub fn qc_reason(record: &ParticipantRecord, config: &QcConfig) -> Option<ExclusionReason> {
    if config.require_fasting && !record.labs.fasting {
        return Some(ExclusionReason::NotFasting);
    }
    let bmi = record.demographics.effective_bmi();
    if let Some(b) = bmi {
        if b < config.bmi_range.0 || b > config.bmi_range.1 {
            return Some(ExclusionReason::BmiOutOfRange);
        }
    }
    let homa = record.homa_ir();
    if let Some(h) = homa {
        if h.value() >= config.homa_max {
            return Some(ExclusionReason::HomaOutlier);
        }
    }
    let window = AggregationWindow::custom(config.wearable_window_days, record.labs.draw_date);
    let wearable_days = record
        .days
        .iter()
        .filter(|d| window.contains(d.date) && d.has_core_metric())
        .count();
    if wearable_days < config.min_wearable_days {
        return Some(ExclusionReason::InsufficientWearableDays);
    }
    if bmi.is_none() || homa.is_none() {
        return Some(ExclusionReason::MissingRequiredFields);
    }
    None
}

/// Apply the exclusion gates. Exclusion is not an error; the report
/// tallies each reason.
pub fn apply_quality_control(
    records: &[ParticipantRecord],
    config: &QcConfig,
) -> (Vec<ParticipantRecord>, QcReport) {
    let mut report = QcReport {
        input_n: records.len(),
        ..QcReport::default()
    };
    let mut retained = Vec::new();
    for record in records {
        match qc_reason(record, config) {
            None => retained.push(record.clone()),
            Some(ExclusionReason::NotFasting) => report.not_fasting += 1,
            Some(ExclusionReason::BmiOutOfRange) => report.bmi_out_of_range += 1,
            Some(ExclusionReason::HomaOutlier) => report.homa_outlier += 1,
            Some(ExclusionReason::InsufficientWearableDays) => {
                report.insufficient_wearable_days += 1
            }
            Some(ExclusionReason::MissingRequiredFields) => report.missing_required_fields += 1,
        }
    }
    report.retained_n = retained.len();
    (retained, report)
}
