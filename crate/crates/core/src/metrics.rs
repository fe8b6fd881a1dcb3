//! Regression, classification, ranking, and correlation metrics.
//!
//! Undefined quantities (zero denominators, single-class inputs) are
//! reported as `None` rather than silently returning a number.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::IrClass;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("both classes must be present for ranking metrics")]
    SingleClass,
    #[error("need at least {min} observations, got {got}")]
    TooFew { min: usize, got: usize },
}

/// Regression fit summary. `r2` is `None` when the targets are constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub r2: Option<f64>,
    pub mae: f64,
    pub mse: f64,
}

pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<RegressionMetrics, MetricError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricError::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p).powi(2))
        .sum();
    let mae = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p).abs())
        .sum::<f64>()
        / n;
    let mse = ss_res / n;
    let r2 = if ss_tot > 0.0 {
        Some(1.0 - ss_res / ss_tot)
    } else {
        None
    };
    Ok(RegressionMetrics { r2, mae, mse })
}

/// Binary confusion counts (IR is the positive class) alongside the
/// three-class matrix needed for adjusted specificity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// matrix[true][pred] over (IS, ImpairedIS, IR)
    pub three_class: [[usize; 3]; 3],
}

fn class_index(c: IrClass) -> usize {
    match c {
        IrClass::InsulinSensitive => 0,
        IrClass::ImpairedSensitivity => 1,
        IrClass::InsulinResistant => 2,
    }
}

impl ConfusionCounts {
    pub fn from_classes(pairs: &[(IrClass, IrClass)]) -> Self {
        let mut c = ConfusionCounts::default();
        for &(truth, pred) in pairs {
            c.three_class[class_index(truth)][class_index(pred)] += 1;
            match (truth.is_ir(), pred.is_ir()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// The binary counts implied by collapsing the 3-class matrix.
    pub fn binary_consistent(&self) -> bool {
        let m = &self.three_class;
        let tp = m[2][2];
        let fn_ = m[2][0] + m[2][1];
        let fp = m[0][2] + m[1][2];
        let tn = m[0][0] + m[0][1] + m[1][0] + m[1][1];
        (tp, fp, tn, fn_) == (self.tp, self.fp, self.tn, self.fn_)
    }
}

/// Rates derived from confusion counts; each is `None` when its
/// denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Specificity with only true-IS subjects in the negative pool:
    /// Impaired-IS subjects do not count as false positives.
    pub adjusted_specificity: Option<f64>,
    pub precision: Option<f64>,
}

fn rate(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

pub fn classification_metrics(counts: &ConfusionCounts) -> ClassificationMetrics {
    let m = &counts.three_class;
    // among true IS: predicted IR are false positives, the rest negatives
    let fp_is = m[0][2];
    let tn_is = m[0][0] + m[0][1];
    ClassificationMetrics {
        sensitivity: rate(counts.tp, counts.tp + counts.fn_),
        specificity: rate(counts.tn, counts.tn + counts.fp),
        adjusted_specificity: rate(tn_is, tn_is + fp_is),
        precision: rate(counts.tp, counts.tp + counts.fp),
    }
}

/// ROC and precision-recall summary with the pooled curve points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingCurves {
    pub auroc: f64,
    pub auprc: f64,
    /// (fpr, tpr) points, ascending fpr.
    pub roc: Vec<(f64, f64)>,
    /// (recall, precision) points, ascending recall.
    pub pr: Vec<(f64, f64)>,
}

/// AUROC as the probability a positive outranks a negative (ties get
/// half credit), plus stepwise precision-recall integration over
/// descending score thresholds.
pub fn ranking_curves(scores: &[f64], labels: &[bool]) -> Result<RankingCurves, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }

    // sort descending by score; walk threshold groups of tied scores
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut roc = vec![(0.0, 0.0)];
    let mut pr: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auroc_area = 0.0;
    let mut auprc = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut d_tp, mut d_fp) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                d_tp += 1;
            } else {
                d_fp += 1;
            }
            j += 1;
        }
        let (fpr0, tpr0) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        tp += d_tp;
        fp += d_fp;
        let (fpr1, tpr1) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        // trapezoid across the tie group: equivalent to half credit per tie
        auroc_area += (fpr1 - fpr0) * (tpr1 + tpr0) / 2.0;
        roc.push((fpr1, tpr1));

        let recall = tpr1;
        let precision = tp as f64 / (tp + fp) as f64;
        auprc += (recall - prev_recall) * precision;
        prev_recall = recall;
        pr.push((recall, precision));
        i = j;
    }
    Ok(RankingCurves {
        auroc: auroc_area,
        auprc,
        roc,
        pr,
    })
}

/// Pearson correlation with a two-sided p-value via the t transform.
/// `r` is `None` when either series has zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(MetricError::TooFew { min: 3, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(PearsonResult {
            r: None,
            p_value: None,
            n,
        });
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * ((nf - 2.0) / (1.0 - r * r)).sqrt();
        crate::stats::students_t_two_sided_p(t, nf - 2.0)
    };
    Ok(PearsonResult {
        r: Some(r),
        p_value: Some(p),
        n,
    })
}

/// Coefficient of variation in percent, population standard deviation.
/// `None` for fewer than one value or zero mean.
pub fn coefficient_of_variation(series: &[f64]) -> Option<f64> {
    if series.is_empty() {
        return None;
    }
    // a constant series has zero dispersion exactly; summing first would
    // manufacture rounding noise
    if series.iter().all(|&v| v == series[0]) {
        return if series[0] == 0.0 { None } else { Some(0.0) };
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(100.0 * var.sqrt() / mean.abs())
}

pub fn population_std(series: &[f64]) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn median(series: &[f64]) -> Option<f64> {
    if series.is_empty() {
        return None;
    }
    let mut s = series.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    })
}

/// Metrics for one cross-validation test fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n: usize,
    pub regression: RegressionMetrics,
    pub classification: ClassificationMetrics,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

/// Mean and population standard deviation of a metric over the folds
/// where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n_folds: usize,
}

fn summarize_folds(values: &[Option<f64>]) -> Option<MetricSummary> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return None;
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Some(MetricSummary {
        mean,
        std: population_std(&defined),
        n_folds: defined.len(),
    })
}

/// Full evaluation of pooled test predictions: regression metrics pooled
/// over every test prediction, rate metrics per fold (mean +/- std) and
/// pooled, and the pooled ROC / precision-recall curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub pooled_regression: RegressionMetrics,
    pub pooled_classification: ClassificationMetrics,
    pub pooled_auroc: Option<f64>,
    pub pooled_auprc: Option<f64>,
    pub pooled_counts: ConfusionCounts,
    pub per_fold: Vec<FoldMetrics>,
    pub fold_summary: std::collections::BTreeMap<String, MetricSummary>,
    pub roc_curve: Vec<(f64, f64)>,
    pub pr_curve: Vec<(f64, f64)>,
}

/// Build the report from pooled predictions. `folds[i]` is the test fold
/// of observation i; the predicted HOMA-IR value is the ranking score
/// for the binary IR decision.
pub fn evaluate_predictions(
    y_true: &[f64],
    y_pred: &[f64],
    class_true: &[IrClass],
    class_pred: &[IrClass],
    folds: &[usize],
    k: usize,
) -> Result<EvaluationReport, MetricError> {
    let n = y_true.len();
    if [y_pred.len(), class_true.len(), class_pred.len(), folds.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(MetricError::LengthMismatch {
            left: n,
            right: y_pred.len(),
        });
    }
    if n == 0 {
        return Err(MetricError::Empty);
    }

    let pooled_regression = regression_metrics(y_true, y_pred)?;
    let pairs: Vec<(IrClass, IrClass)> = class_true
        .iter()
        .copied()
        .zip(class_pred.iter().copied())
        .collect();
    let pooled_counts = ConfusionCounts::from_classes(&pairs);
    let pooled_classification = classification_metrics(&pooled_counts);
    let labels: Vec<bool> = class_true.iter().map(|c| c.is_ir()).collect();
    let (pooled_auroc, pooled_auprc, roc_curve, pr_curve) =
        match ranking_curves(y_pred, &labels) {
            Ok(c) => (Some(c.auroc), Some(c.auprc), c.roc, c.pr),
            Err(_) => (None, None, Vec::new(), Vec::new()),
        };

    let mut per_fold = Vec::with_capacity(k);
    for fold in 0..k {
        let idx: Vec<usize> = (0..n).filter(|&i| folds[i] == fold).collect();
        if idx.is_empty() {
            continue;
        }
        let yt: Vec<f64> = idx.iter().map(|&i| y_true[i]).collect();
        let yp: Vec<f64> = idx.iter().map(|&i| y_pred[i]).collect();
        let fold_pairs: Vec<(IrClass, IrClass)> =
            idx.iter().map(|&i| (class_true[i], class_pred[i])).collect();
        let fold_labels: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        let counts = ConfusionCounts::from_classes(&fold_pairs);
        let (auroc, auprc) = match ranking_curves(&yp, &fold_labels) {
            Ok(c) => (Some(c.auroc), Some(c.auprc)),
            Err(_) => (None, None),
        };
        per_fold.push(FoldMetrics {
            fold,
            n: idx.len(),
            regression: regression_metrics(&yt, &yp)?,
            classification: classification_metrics(&counts),
            auroc,
            auprc,
        });
    }

    let mut fold_summary = std::collections::BTreeMap::new();
    let collect =
        |f: &dyn Fn(&FoldMetrics) -> Option<f64>| per_fold.iter().map(f).collect::<Vec<_>>();
    let entries: [(&str, Vec<Option<f64>>); 9] = [
        ("r2", collect(&|m| m.regression.r2)),
        ("mae", collect(&|m| Some(m.regression.mae))),
        ("mse", collect(&|m| Some(m.regression.mse))),
        ("sensitivity", collect(&|m| m.classification.sensitivity)),
        ("specificity", collect(&|m| m.classification.specificity)),
        (
            "adjusted_specificity",
            collect(&|m| m.classification.adjusted_specificity),
        ),
        ("precision", collect(&|m| m.classification.precision)),
        ("auroc", collect(&|m| m.auroc)),
        ("auprc", collect(&|m| m.auprc)),
    ];
    for (name, values) in entries {
        if let Some(s) = summarize_folds(&values) {
            fold_summary.insert(name.to_string(), s);
        }
    }

    Ok(EvaluationReport {
        n,
        pooled_regression,
        pooled_classification,
        pooled_auroc,
        pooled_auprc,
        pooled_counts,
        per_fold,
        fold_summary,
        roc_curve,
        pr_curve,
    })
}
