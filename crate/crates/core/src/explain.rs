//! SHAP attributions for both booster types, plus linear probing of the
//! autoencoder latent space.
//!
//! Tree attributions use the exact polynomial-time path algorithm under
//! tree-path-dependent expectations: the value of a feature coalition is
//! computed by following the input where the coalition fixes the split
//! feature and averaging children by training cover elsewhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbm::{GbmModel, Learner, RegressionTree, TreeNode};

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("feature count mismatch: model expects {expected}, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("model has the wrong learner type for this explainer")]
    WrongLearner,
    #[error("probe labels must contain both classes")]
    SingleClassLabels,
    #[error("embedding rows and labels differ in length")]
    LengthMismatch,
}

/// Per-feature attribution for one prediction. Local accuracy holds:
/// `base_value + sum(values) = prediction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapVector {
    pub base_value: f64,
    pub values: Vec<f64>,
}

impl ShapVector {
    pub fn total(&self) -> f64 {
        self.base_value + self.values.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature_index: usize,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(
    path: &mut Vec<PathElement>,
    unique_depth: usize,
    zero_fraction: f64,
    one_fraction: f64,
    feature_index: usize,
) {
    path.truncate(unique_depth);
    path.push(PathElement {
        feature_index,
        zero_fraction,
        one_fraction,
        pweight: if unique_depth == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..unique_depth).rev() {
        path[i + 1].pweight +=
            one_fraction * path[i].pweight * (i + 1) as f64 / (unique_depth + 1) as f64;
        path[i].pweight =
            zero_fraction * path[i].pweight * (unique_depth - i) as f64 / (unique_depth + 1) as f64;
    }
}

fn unwind_path(path: &mut [PathElement], unique_depth: usize, path_index: usize) {
    let one_fraction = path[path_index].one_fraction;
    let zero_fraction = path[path_index].zero_fraction;
    let mut next_one_portion = path[unique_depth].pweight;
    for i in (0..unique_depth).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight =
                next_one_portion * (unique_depth + 1) as f64 / ((i + 1) as f64 * one_fraction);
            next_one_portion = tmp
                - path[i].pweight * zero_fraction * (unique_depth - i) as f64
                    / (unique_depth + 1) as f64;
        } else {
            path[i].pweight = path[i].pweight * (unique_depth + 1) as f64
                / (zero_fraction * (unique_depth - i) as f64);
        }
    }
    for i in path_index..unique_depth {
        path[i].feature_index = path[i + 1].feature_index;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

fn unwound_path_sum(path: &[PathElement], unique_depth: usize, path_index: usize) -> f64 {
    let one_fraction = path[path_index].one_fraction;
    let zero_fraction = path[path_index].zero_fraction;
    let mut next_one_portion = path[unique_depth].pweight;
    let mut total = 0.0;
    for i in (0..unique_depth).rev() {
        if one_fraction != 0.0 {
            let tmp =
                next_one_portion * (unique_depth + 1) as f64 / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next_one_portion = path[i].pweight
                - tmp * zero_fraction * (unique_depth - i) as f64 / (unique_depth + 1) as f64;
        } else {
            total += path[i].pweight / zero_fraction * (unique_depth + 1) as f64
                / (unique_depth - i) as f64;
        }
    }
    total
}

fn node_cover(tree: &RegressionTree, idx: usize) -> f64 {
    match &tree.nodes[idx] {
        TreeNode::Leaf { cover, .. } => *cover,
        TreeNode::Split { cover, .. } => *cover,
    }
}

#[allow(clippy::too_many_arguments)]
fn tree_shap_recurse(
    tree: &RegressionTree,
    row: &[f64],
    contribs: &mut [f64],
    node_index: usize,
    mut unique_depth: usize,
    mut path: Vec<PathElement>,
    parent_zero_fraction: f64,
    parent_one_fraction: f64,
    parent_feature_index: usize,
) {
    extend_path(
        &mut path,
        unique_depth,
        parent_zero_fraction,
        parent_one_fraction,
        parent_feature_index,
    );
    match &tree.nodes[node_index] {
        TreeNode::Leaf { weight, .. } => {
            for i in 1..=unique_depth {
                let w = unwound_path_sum(&path, unique_depth, i);
                let el = &path[i];
                contribs[el.feature_index] += w * (el.one_fraction - el.zero_fraction) * weight;
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            let (hot, cold) = if row[*feature] < *threshold {
                (*left, *right)
            } else {
                (*right, *left)
            };
            let mut incoming_zero = 1.0;
            let mut incoming_one = 1.0;
            // a feature may repeat along the path: undo its prior element
            let mut path_index = 0;
            while path_index <= unique_depth {
                if path[path_index].feature_index == *feature {
                    break;
                }
                path_index += 1;
            }
            if path_index != unique_depth + 1 {
                incoming_zero = path[path_index].zero_fraction;
                incoming_one = path[path_index].one_fraction;
                unwind_path(&mut path, unique_depth, path_index);
                unique_depth -= 1;
            }
            let hot_zero = node_cover(tree, hot) / cover * incoming_zero;
            let cold_zero = node_cover(tree, cold) / cover * incoming_zero;
            tree_shap_recurse(
                tree,
                row,
                contribs,
                hot,
                unique_depth + 1,
                path.clone(),
                hot_zero,
                incoming_one,
                *feature,
            );
            tree_shap_recurse(
                tree,
                row,
                contribs,
                cold,
                unique_depth + 1,
                path,
                cold_zero,
                0.0,
                *feature,
            );
        }
    }
}

/// Cover-weighted mean prediction of one tree over its training rows.
pub fn tree_expected_value(tree: &RegressionTree) -> f64 {
    fn walk(tree: &RegressionTree, idx: usize) -> f64 {
        match &tree.nodes[idx] {
            TreeNode::Leaf { weight, cover } => weight * cover,
            TreeNode::Split { left, right, .. } => walk(tree, *left) + walk(tree, *right),
        }
    }
    walk(tree, 0) / node_cover(tree, 0)
}

/// Exact SHAP values for a tree-booster prediction, summed across trees
/// and scaled by the learning rate.
pub fn tree_shap_values(model: &GbmModel, row: &[f64]) -> Result<ShapVector, ExplainError> {
    let trees = match &model.learner {
        Learner::Trees(trees) => trees,
        Learner::Linear { .. } => return Err(ExplainError::WrongLearner),
    };
    if row.len() != model.columns.len() {
        return Err(ExplainError::FeatureMismatch {
            expected: model.columns.len(),
            got: row.len(),
        });
    }
    let eta = model.params.learning_rate;
    let mut values = vec![0.0; row.len()];
    let mut base = model.base_score;
    for tree in trees {
        let mut contribs = vec![0.0; row.len()];
        tree_shap_recurse(
            tree,
            row,
            &mut contribs,
            0,
            0,
            Vec::new(),
            1.0,
            1.0,
            usize::MAX,
        );
        for (v, c) in values.iter_mut().zip(&contribs) {
            *v += eta * c;
        }
        base += eta * tree_expected_value(tree);
    }
    Ok(ShapVector {
        base_value: base,
        values,
    })
}

/// SHAP values for a linear-booster prediction against background means:
/// `phi_j = w_j * (x_j - mean_j)`.
pub fn linear_shap_values(
    model: &GbmModel,
    row: &[f64],
    background_means: &[f64],
) -> Result<ShapVector, ExplainError> {
    let (weights, bias) = match &model.learner {
        Learner::Linear { weights, bias } => (weights, *bias),
        Learner::Trees(_) => return Err(ExplainError::WrongLearner),
    };
    if row.len() != model.columns.len() || background_means.len() != model.columns.len() {
        return Err(ExplainError::FeatureMismatch {
            expected: model.columns.len(),
            got: row.len(),
        });
    }
    let values: Vec<f64> = weights
        .iter()
        .zip(row.iter().zip(background_means))
        .map(|(w, (x, mu))| w * (x - mu))
        .collect();
    let base = model.base_score
        + bias
        + weights
            .iter()
            .zip(background_means)
            .map(|(w, mu)| w * mu)
            .sum::<f64>();
    Ok(ShapVector {
        base_value: base,
        values,
    })
}

/// SHAP values for either learner type; the linear route uses the
/// supplied background rows for its means.
pub fn shap_values(
    model: &GbmModel,
    row: &[f64],
    background: &[Vec<f64>],
) -> Result<ShapVector, ExplainError> {
    match &model.learner {
        Learner::Trees(_) => tree_shap_values(model, row),
        Learner::Linear { .. } => {
            let d = model.columns.len();
            let n = background.len().max(1) as f64;
            let means: Vec<f64> = (0..d)
                .map(|j| background.iter().map(|r| r[j]).sum::<f64>() / n)
                .collect();
            linear_shap_values(model, row, &means)
        }
    }
}

/// Mean |SHAP| per feature over a dataset, with a deterministic ranking
/// (descending importance, ties by feature name).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub columns: Vec<String>,
    pub mean_abs_shap: Vec<f64>,
    /// Column indices from most to least important.
    pub ranking: Vec<usize>,
}

pub fn importance_summary(
    model: &GbmModel,
    rows: &[Vec<f64>],
) -> Result<ImportanceSummary, ExplainError> {
    let d = model.columns.len();
    let mut totals = vec![0.0; d];
    for row in rows {
        let shap = shap_values(model, row, rows)?;
        for (t, v) in totals.iter_mut().zip(&shap.values) {
            *t += v.abs();
        }
    }
    let n = rows.len().max(1) as f64;
    let mean_abs: Vec<f64> = totals.iter().map(|t| t / n).collect();
    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| {
        mean_abs[b]
            .partial_cmp(&mean_abs[a])
            .unwrap()
            .then_with(|| model.columns[a].cmp(&model.columns[b]))
    });
    Ok(ImportanceSummary {
        columns: model.columns.clone(),
        mean_abs_shap: mean_abs,
        ranking,
    })
}

/// Mean AUROC of a logistic probe on the embeddings under internal
/// 5-fold cross-validation. The probe is the only model that sees the
/// labels; folds with a single class are skipped.
pub fn probe_latent_space(
    embeddings: &[Vec<f64>],
    labels: &[bool],
    seed: u64,
) -> Result<f64, ExplainError> {
    if embeddings.len() != labels.len() {
        return Err(ExplainError::LengthMismatch);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(ExplainError::SingleClassLabels);
    }
    let n = labels.len();
    let k = 5.min(n);
    let folds = crate::pipeline::make_folds(n, k, seed).expect("valid fold sizes");
    let mut aurocs = Vec::new();
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..n).filter(|i| folds[*i] != fold).collect();
        let test_idx: Vec<usize> = (0..n).filter(|i| folds[*i] == fold).collect();
        if test_idx.is_empty() || train_idx.is_empty() {
            continue;
        }
        let (w, b) = fit_logistic(embeddings, labels, &train_idx);
        let scores: Vec<f64> = test_idx
            .iter()
            .map(|&i| {
                b + w
                    .iter()
                    .zip(&embeddings[i])
                    .map(|(wj, xj)| wj * xj)
                    .sum::<f64>()
            })
            .collect();
        let test_labels: Vec<bool> = test_idx.iter().map(|&i| labels[i]).collect();
        if let Ok(curves) = crate::metrics::ranking_curves(&scores, &test_labels) {
            aurocs.push(curves.auroc);
        }
    }
    if aurocs.is_empty() {
        return Err(ExplainError::SingleClassLabels);
    }
    Ok(aurocs.iter().sum::<f64>() / aurocs.len() as f64)
}

/// Pooled mean-|SHAP| importance for one finished experiment. Each
/// participant is explained by the fold model that treated them as test
/// data; linear boosters use their own fold's training rows as
/// background. Importance is keyed by column name since folds may drop
/// different zero-variance columns.
pub fn pooled_importance(
    matrix: &crate::featureset::DesignMatrix,
    result: &crate::pipeline::ExperimentResult,
) -> Result<(ImportanceSummary, Vec<(String, ShapVector)>), ExplainError> {
    use std::collections::BTreeMap;
    let row_of: BTreeMap<&str, usize> = matrix
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    // per-fold standardized training rows for the linear background
    let fold_of: BTreeMap<&str, usize> = result
        .predictions
        .records
        .iter()
        .map(|p| (p.id.as_str(), p.fold))
        .collect();
    let mut fold_background: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for fm in &result.fold_models {
        let train_rows: Vec<Vec<f64>> = matrix
            .ids
            .iter()
            .enumerate()
            .filter(|(_, id)| fold_of.get(id.as_str()) != Some(&fm.fold))
            .map(|(i, _)| {
                crate::featureset::apply_standardizer_row(
                    &fm.standardizer,
                    &matrix.columns,
                    &matrix.rows[i],
                )
                .expect("standardizer columns subset of matrix")
            })
            .collect();
        let features = match &fm.autoencoder {
            Some(ae) => train_rows
                .iter()
                .map(|r| ae.encode_row(r).expect("trained encoder"))
                .collect(),
            None => train_rows,
        };
        fold_background.insert(fm.fold, features);
    }

    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_row = Vec::new();
    for pred in &result.predictions.records {
        let fm = &result.fold_models[pred.fold];
        let i = row_of[pred.id.as_str()];
        let std_row = crate::featureset::apply_standardizer_row(
            &fm.standardizer,
            &matrix.columns,
            &matrix.rows[i],
        )
        .expect("standardizer columns subset of matrix");
        let features = match &fm.autoencoder {
            Some(ae) => ae.encode_row(&std_row).expect("trained encoder"),
            None => std_row,
        };
        let shap = shap_values(&fm.gbm, &features, &fold_background[&pred.fold])?;
        for (name, v) in fm.gbm.columns.iter().zip(&shap.values) {
            *totals.entry(name.clone()).or_insert(0.0) += v.abs();
        }
        per_row.push((pred.id.clone(), shap));
    }
    let n = result.predictions.len().max(1) as f64;
    let columns: Vec<String> = totals.keys().cloned().collect();
    let mean_abs_shap: Vec<f64> = columns.iter().map(|c| totals[c] / n).collect();
    let mut ranking: Vec<usize> = (0..columns.len()).collect();
    ranking.sort_by(|&a, &b| {
        mean_abs_shap[b]
            .partial_cmp(&mean_abs_shap[a])
            .unwrap()
            .then_with(|| columns[a].cmp(&columns[b]))
    });
    Ok((
        ImportanceSummary {
            columns,
            mean_abs_shap,
            ranking,
        },
        per_row,
    ))
}

/// Test-fold embeddings for every participant of a representation-scheme
/// experiment, in prediction order.
pub fn test_fold_embeddings(
    matrix: &crate::featureset::DesignMatrix,
    result: &crate::pipeline::ExperimentResult,
) -> Result<Vec<(String, Vec<f64>)>, ExplainError> {
    use std::collections::BTreeMap;
    let row_of: BTreeMap<&str, usize> = matrix
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut out = Vec::new();
    for pred in &result.predictions.records {
        let fm = &result.fold_models[pred.fold];
        let ae = match &fm.autoencoder {
            Some(ae) => ae,
            None => return Err(ExplainError::WrongLearner),
        };
        let i = row_of[pred.id.as_str()];
        let std_row = crate::featureset::apply_standardizer_row(
            &fm.standardizer,
            &matrix.columns,
            &matrix.rows[i],
        )
        .expect("standardizer columns subset of matrix");
        let z = ae.encode_row(&std_row).expect("trained encoder");
        out.push((pred.id.clone(), z));
    }
    Ok(out)
}

/// Probe AUROCs on the latent space: "high BMI" (>= 30) and "high RHR"
/// (>= cohort median of the window-mean RHR).
pub fn latent_probes(
    records: &[crate::domain::ParticipantRecord],
    matrix: &crate::featureset::DesignMatrix,
    result: &crate::pipeline::ExperimentResult,
    seed: u64,
) -> Result<std::collections::BTreeMap<String, f64>, ExplainError> {
    use std::collections::BTreeMap;
    let by_id: BTreeMap<&str, &crate::domain::ParticipantRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let embedded = test_fold_embeddings(matrix, result)?;
    let mut embeddings = Vec::with_capacity(embedded.len());
    let mut bmi_labels = Vec::with_capacity(embedded.len());
    let mut rhr_values = Vec::with_capacity(embedded.len());
    for (id, z) in &embedded {
        let record = by_id
            .get(id.as_str())
            .ok_or(ExplainError::LengthMismatch)?;
        let bmi = record.demographics.effective_bmi().unwrap_or(f64::NAN);
        bmi_labels.push(bmi >= 30.0);
        let window = crate::featureset::AggregationWindow::custom(
            result.window_days,
            record.labs.draw_date,
        );
        let agg = crate::featureset::aggregate_available(&record.days, &window);
        rhr_values.push(agg.get("rhr").map(|s| s.mean).unwrap_or(f64::NAN));
        embeddings.push(z.clone());
    }
    let rhr_median = crate::metrics::median(&rhr_values).unwrap_or(f64::NAN);
    let rhr_labels: Vec<bool> = rhr_values.iter().map(|&v| v >= rhr_median).collect();

    let mut out = BTreeMap::new();
    out.insert(
        "high_bmi".to_string(),
        probe_latent_space(&embeddings, &bmi_labels, seed)?,
    );
    out.insert(
        "high_rhr".to_string(),
        probe_latent_space(&embeddings, &rhr_labels, seed.wrapping_add(1))?,
    );
    Ok(out)
}

/// L2-regularized logistic regression by full-batch gradient descent.
fn fit_logistic(rows: &[Vec<f64>], labels: &[bool], train_idx: &[usize]) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let n = train_idx.len() as f64;
    let l2 = 1e-3;
    let lr = 0.5;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for &i in train_idx {
            let z: f64 = b + w.iter().zip(&rows[i]).map(|(wj, xj)| wj * xj).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if labels[i] { 1.0 } else { 0.0 };
            gb += err;
            for (g, x) in gw.iter_mut().zip(&rows[i]) {
                *g += err * x;
            }
        }
        b -= lr * gb / n;
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= lr * (gj / n + l2 * *wj);
        }
    }
    (w, b)
}
