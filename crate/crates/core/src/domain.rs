//! Core clinical types: HOMA-IR, insulin-resistance classes, and the
//! BMI/activity strata used throughout the pipeline.

use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("negative {quantity}: {value}")]
    NegativeInput { quantity: &'static str, value: f64 },
    #[error("non-finite HOMA-IR value")]
    NonFiniteHomaIr,
    #[error("invalid thresholds: is_upper={is_upper}, ir_lower={ir_lower}")]
    InvalidThresholds { is_upper: f64, ir_lower: f64 },
}

/// HOMA-IR value, dimensionless: insulin (µU/mL) × glucose (mg/dL) / 405.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct HomaIr(f64);

impl HomaIr {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if !value.is_finite() {
            return Err(DomainError::NonFiniteHomaIr);
        }
        if value < 0.0 {
            return Err(DomainError::NegativeInput {
                quantity: "HOMA-IR",
                value,
            });
        }
        Ok(HomaIr(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl fmt::Display for HomaIr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// HOMA-IR = insulin (µU/mL) × glucose (mg/dL) / 405.
pub fn compute_homa_ir(insulin: f64, glucose: f64) -> Result<HomaIr, DomainError> {
    if insulin < 0.0 || !insulin.is_finite() {
        return Err(DomainError::NegativeInput {
            quantity: "fasting insulin",
            value: insulin,
        });
    }
    if glucose < 0.0 || !glucose.is_finite() {
        return Err(DomainError::NegativeInput {
            quantity: "fasting glucose",
            value: glucose,
        });
    }
    HomaIr::new(insulin * glucose / 405.0)
}

/// Insulin-resistance class. Ordering follows disease progression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IrClass {
    /// Insulin sensitive: HOMA-IR < 1.5.
    #[serde(rename = "IS")]
    InsulinSensitive,
    /// Impaired insulin sensitivity: 1.5 <= HOMA-IR < 2.9.
    #[serde(rename = "ImpairedIS")]
    ImpairedSensitivity,
    /// Insulin resistant: HOMA-IR >= 2.9.
    #[serde(rename = "IR")]
    InsulinResistant,
}

impl IrClass {
    pub fn is_ir(&self) -> bool {
        matches!(self, IrClass::InsulinResistant)
    }

    pub fn label(&self) -> &'static str {
        match self {
            IrClass::InsulinSensitive => "IS",
            IrClass::ImpairedSensitivity => "ImpairedIS",
            IrClass::InsulinResistant => "IR",
        }
    }
}

impl fmt::Display for IrClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Class cut points. Defaults are 1.5 (IS upper) and 2.9 (IR lower).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrThresholds {
    pub is_upper: f64,
    pub ir_lower: f64,
}

impl Default for IrThresholds {
    fn default() -> Self {
        IrThresholds {
            is_upper: 1.5,
            ir_lower: 2.9,
        }
    }
}

impl IrThresholds {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.is_upper > 0.0 && self.is_upper < self.ir_lower {
            Ok(())
        } else {
            Err(DomainError::InvalidThresholds {
                is_upper: self.is_upper,
                ir_lower: self.ir_lower,
            })
        }
    }
}

/// Threshold classification of a HOMA-IR value. The IR boundary is
/// inclusive: a value exactly at `ir_lower` classifies as IR.
pub fn classify_ir(h: HomaIr, t: &IrThresholds) -> Result<IrClass, DomainError> {
    t.validate()?;
    let v = h.value();
    if !v.is_finite() {
        return Err(DomainError::NonFiniteHomaIr);
    }
    Ok(if v < t.is_upper {
        IrClass::InsulinSensitive
    } else if v >= t.ir_lower {
        IrClass::InsulinResistant
    } else {
        IrClass::ImpairedSensitivity
    })
}

/// Convenience for raw predicted values (clamped at zero before
/// classification; regressors may emit slightly negative outputs).
pub fn classify_value(v: f64, t: &IrThresholds) -> Result<IrClass, DomainError> {
    if !v.is_finite() {
        return Err(DomainError::NonFiniteHomaIr);
    }
    classify_ir(HomaIr::new(v.max(0.0))?, t)
}

/// One blood draw. Concentrations are mg/dL except insulin (µU/mL) and
/// HbA1c (percent). Optional analytes live in `metabolic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BloodPanel {
    pub draw_date: NaiveDate,
    pub fasting: bool,
    pub insulin: Option<f64>,
    pub glucose: Option<f64>,
    pub hba1c: Option<f64>,
    pub hdl: Option<f64>,
    pub ldl: Option<f64>,
    pub triglycerides: Option<f64>,
    pub total_cholesterol: Option<f64>,
    pub metabolic: BTreeMap<String, f64>,
}

impl BloodPanel {
    /// HOMA-IR from this panel, when insulin and glucose are present.
    pub fn homa_ir(&self) -> Option<HomaIr> {
        match (self.insulin, self.glucose) {
            (Some(i), Some(g)) => compute_homa_ir(i, g).ok(),
            _ => None,
        }
    }
}

/// Subject demographics. BMI is derived from height/weight when both are
/// present; an explicit `bmi` field is the fallback. On a conflict larger
/// than 0.5 kg/m² the derived value wins and the conflict is logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: f64,
    pub gender: String,
    pub ethnicity: String,
    pub height_m: Option<f64>,
    pub weight_kg: Option<f64>,
    pub bmi: Option<f64>,
    pub hypertension: bool,
    pub comorbidities: BTreeMap<String, bool>,
}

impl Demographics {
    pub fn effective_bmi(&self) -> Option<f64> {
        let derived = match (self.height_m, self.weight_kg) {
            (Some(h), Some(w)) if h > 0.0 => Some(w / (h * h)),
            _ => None,
        };
        match (derived, self.bmi) {
            (Some(d), Some(explicit)) => {
                if (d - explicit).abs() > 0.5 {
                    log::warn!(
                        "BMI conflict: derived {:.2} vs reported {:.2}; using derived",
                        d,
                        explicit
                    );
                }
                Some(d)
            }
            (Some(d), None) => Some(d),
            (None, explicit) => explicit,
        }
    }
}

/// One day of wearable-derived markers. Missing sensors are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WearableDaily {
    pub date: NaiveDate,
    pub rhr: Option<f64>,
    pub hrv_rmssd: Option<f64>,
    pub steps: Option<f64>,
    pub sleep_minutes: Option<f64>,
    pub extras: BTreeMap<String, f64>,
}

impl WearableDaily {
    pub fn new(date: NaiveDate) -> Self {
        WearableDaily {
            date,
            rhr: None,
            hrv_rmssd: None,
            steps: None,
            sleep_minutes: None,
            extras: BTreeMap::new(),
        }
    }

    /// A day "counts" for quality control when at least one core activity
    /// metric (RHR or steps) is present.
    pub fn has_core_metric(&self) -> bool {
        self.rhr.is_some() || self.steps.is_some()
    }
}

/// Fully joined subject record: demographics, wearable series (sorted by
/// date), and the blood panel anchored at its draw date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub id: String,
    pub demographics: Demographics,
    pub days: Vec<WearableDaily>,
    pub labs: BloodPanel,
}

impl ParticipantRecord {
    pub fn homa_ir(&self) -> Option<HomaIr> {
        self.labs.homa_ir()
    }

    /// Median of daily step counts over all observed days with data.
    pub fn median_daily_steps(&self) -> Option<f64> {
        let mut steps: Vec<f64> = self.days.iter().filter_map(|d| d.steps).collect();
        if steps.is_empty() {
            return None;
        }
        steps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = steps.len();
        Some(if n % 2 == 1 {
            steps[n / 2]
        } else {
            (steps[n / 2 - 1] + steps[n / 2]) / 2.0
        })
    }
}

/// BMI class; cuts at 18.5 / 25 / 30 with ">=" at each lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmiClass {
    Underweight,
    Normal,
    Overweight,
    Obese,
}

/// Activity class from median daily steps; cuts at 5000 / 7500 / 10000 /
/// 12500 with ">=" at each lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityClass {
    Sedentary,
    LowActive,
    SomewhatActive,
    Active,
    HighlyActive,
}

pub fn bmi_class(bmi: f64) -> BmiClass {
    if bmi >= 30.0 {
        BmiClass::Obese
    } else if bmi >= 25.0 {
        BmiClass::Overweight
    } else if bmi >= 18.5 {
        BmiClass::Normal
    } else {
        BmiClass::Underweight
    }
}

pub fn activity_class(median_daily_steps: f64) -> ActivityClass {
    if median_daily_steps >= 12500.0 {
        ActivityClass::HighlyActive
    } else if median_daily_steps >= 10000.0 {
        ActivityClass::Active
    } else if median_daily_steps >= 7500.0 {
        ActivityClass::SomewhatActive
    } else if median_daily_steps >= 5000.0 {
        ActivityClass::LowActive
    } else {
        ActivityClass::Sedentary
    }
}

/// Strata for stratified evaluation. `None` means the inputs needed for
/// that stratum are missing.
pub fn derive_strata(
    d: &Demographics,
    median_daily_steps: Option<f64>,
) -> (Option<BmiClass>, Option<ActivityClass>) {
    let bmi = d.effective_bmi().map(bmi_class);
    let activity = median_daily_steps.map(activity_class);
    (bmi, activity)
}
