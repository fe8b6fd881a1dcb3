//! Gradient-boosted regression with exact greedy tree learners and
//! elastic-net linear learners, squared-error loss.
//!
//! Each boosting round fits a weak learner to the current gradients
//! (g_i = yhat_i - y_i, h_i = 1 for squared error). Trees grow by exact
//! greedy search over pre-sorted feature columns; the split gain is
//!
//!   1/2 * [ G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda)
//!           - (G_L+G_R)^2/(H_L+H_R+lambda) ] - gamma
//!
//! and leaf weights are -sign(G) * max(|G|-alpha, 0) / (H+lambda).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GbmError {
    #[error("non-finite value in training data")]
    NonFiniteInput,
    #[error("empty training data")]
    EmptyData,
    #[error("feature columns mismatch: model expects {expected}, got {got}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoosterKind {
    Tree,
    Linear,
}

/// Boosting hyperparameters. `base_score = None` uses the training-target
/// mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbmParams {
    pub booster: BoosterKind,
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub reg_lambda: f64,
    pub reg_alpha: f64,
    pub gamma: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub base_score: Option<f64>,
    pub random_state: u64,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            booster: BoosterKind::Tree,
            n_estimators: 100,
            learning_rate: 0.1,
            reg_lambda: 1.0,
            reg_alpha: 0.0,
            gamma: 0.0,
            max_depth: 3,
            min_child_weight: 1.0,
            base_score: None,
            random_state: 0,
        }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<(), GbmError> {
        if self.n_estimators == 0 {
            return Err(GbmError::InvalidParams("n_estimators must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GbmError::InvalidParams("learning_rate must be > 0".into()));
        }
        if self.reg_lambda < 0.0 || self.reg_alpha < 0.0 || self.gamma < 0.0 {
            return Err(GbmError::InvalidParams(
                "regularization terms must be >= 0".into(),
            ));
        }
        if self.booster == BoosterKind::Tree && self.max_depth == 0 {
            return Err(GbmError::InvalidParams("max_depth must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Sum of hessians of the training rows that reached this node.
        cover: f64,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

/// Binary regression tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { weight, .. } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    idx = if row[*feature] < *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], idx: usize) -> usize {
            match &nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    /// Features referenced by any split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                _ => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Learner {
    Trees(Vec<RegressionTree>),
    Linear { weights: Vec<f64>, bias: f64 },
}

/// Trained boosted model. Prediction is
/// `base_score + learning_rate * sum(tree outputs)` for trees, and
/// `base_score + bias + w . x` for the linear booster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub params: GbmParams,
    pub columns: Vec<String>,
    pub base_score: f64,
    pub learner: Learner,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitParams {
    pub reg_lambda: f64,
    pub reg_alpha: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
}

impl From<&GbmParams> for SplitParams {
    fn from(p: &GbmParams) -> Self {
        SplitParams {
            reg_lambda: p.reg_lambda,
            reg_alpha: p.reg_alpha,
            gamma: p.gamma,
            min_child_weight: p.min_child_weight,
        }
    }
}

fn soft_threshold(v: f64, alpha: f64) -> f64 {
    v.signum() * (v.abs() - alpha).max(0.0)
}

/// Leaf weight for gradient sum `g` and hessian sum `h`:
/// `-sign(G) * max(|G| - alpha, 0) / (H + lambda)`.
pub fn leaf_weight(g: f64, h: f64, reg_lambda: f64, reg_alpha: f64) -> f64 {
    -soft_threshold(g, reg_alpha) / (h + reg_lambda)
}

fn half_gain(g: f64, h: f64, reg_lambda: f64) -> f64 {
    g * g / (h + reg_lambda)
}

/// Exact greedy split search over the rows in `idx`. Candidate thresholds
/// are midpoints between consecutive distinct values of each feature;
/// ties in gain break toward the lowest feature index, then the lowest
/// threshold. Returns `None` when no candidate has positive gain or every
/// feature is constant on the node.
pub fn best_split(
    grads: &[f64],
    hess: &[f64],
    features: &[Vec<f64>],
    idx: &[usize],
    sp: &SplitParams,
) -> Option<SplitDecision> {
    if idx.len() < 2 {
        return None;
    }
    let g_total: f64 = idx.iter().map(|&i| grads[i]).sum();
    let h_total: f64 = idx.iter().map(|&i| hess[i]).sum();
    let parent = half_gain(g_total, h_total, sp.reg_lambda);

    let mut best: Option<SplitDecision> = None;
    for (feature, column) in features.iter().enumerate() {
        let mut sorted: Vec<usize> = idx.to_vec();
        sorted.sort_by(|&a, &b| column[a].partial_cmp(&column[b]).unwrap().then(a.cmp(&b)));
        // direct suffix sums rather than total-minus-prefix: symmetric
        // splits then produce bitwise-equal gains, so ties resolve by
        // the declared (feature, threshold) order instead of rounding
        let m = sorted.len();
        let mut suffix_g = vec![0.0; m + 1];
        let mut suffix_h = vec![0.0; m + 1];
        for k in (0..m).rev() {
            suffix_g[k] = suffix_g[k + 1] + grads[sorted[k]];
            suffix_h[k] = suffix_h[k + 1] + hess[sorted[k]];
        }
        let mut g_left = 0.0;
        let mut h_left = 0.0;
        for k in 1..m {
            g_left += grads[sorted[k - 1]];
            h_left += hess[sorted[k - 1]];
            let prev = column[sorted[k - 1]];
            let next = column[sorted[k]];
            if prev == next {
                continue;
            }
            let h_right = suffix_h[k];
            if h_left < sp.min_child_weight || h_right < sp.min_child_weight {
                continue;
            }
            let g_right = suffix_g[k];
            let gain = 0.5
                * (half_gain(g_left, h_left, sp.reg_lambda)
                    + half_gain(g_right, h_right, sp.reg_lambda)
                    - parent)
                - sp.gamma;
            if gain > best.map_or(0.0, |b| b.gain) {
                best = Some(SplitDecision {
                    feature,
                    threshold: (prev + next) / 2.0,
                    gain,
                });
            }
        }
    }
    best
}

fn grow_tree(
    grads: &[f64],
    hess: &[f64],
    features: &[Vec<f64>],
    idx: Vec<usize>,
    depth: usize,
    params: &GbmParams,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let g: f64 = idx.iter().map(|&i| grads[i]).sum();
    let h: f64 = idx.iter().map(|&i| hess[i]).sum();
    if depth < params.max_depth {
        if let Some(split) = best_split(grads, hess, features, &idx, &params.into()) {
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
                .into_iter()
                .partition(|&i| features[split.feature][i] < split.threshold);
            let me = nodes.len();
            nodes.push(TreeNode::Split {
                feature: split.feature,
                threshold: split.threshold,
                left: 0,
                right: 0,
                cover: h,
            });
            let left = grow_tree(grads, hess, features, left_idx, depth + 1, params, nodes);
            let right = grow_tree(grads, hess, features, right_idx, depth + 1, params, nodes);
            if let TreeNode::Split {
                left: l, right: r, ..
            } = &mut nodes[me]
            {
                *l = left;
                *r = right;
            }
            return me;
        }
    }
    let me = nodes.len();
    nodes.push(TreeNode::Leaf {
        weight: leaf_weight(g, h, params.reg_lambda, params.reg_alpha),
        cover: h,
    });
    me
}

fn check_inputs(rows: &[Vec<f64>], y: &[f64]) -> Result<(), GbmError> {
    if rows.is_empty() || y.is_empty() || rows.len() != y.len() {
        return Err(GbmError::EmptyData);
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(GbmError::NonFiniteInput);
    }
    Ok(())
}

fn to_columns(rows: &[Vec<f64>], n_cols: usize) -> Vec<Vec<f64>> {
    (0..n_cols)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

/// Fit a boosted tree ensemble by K rounds of exact greedy growth on the
/// squared-error gradients.
pub fn fit_tree_ensemble(
    rows: &[Vec<f64>],
    y: &[f64],
    columns: &[String],
    params: &GbmParams,
) -> Result<GbmModel, GbmError> {
    params.validate()?;
    check_inputs(rows, y)?;
    let n = y.len();
    let features = to_columns(rows, columns.len());
    let base = params
        .base_score
        .unwrap_or_else(|| y.iter().sum::<f64>() / n as f64);
    let mut yhat = vec![base; n];
    let hess = vec![1.0; n];
    let mut trees = Vec::with_capacity(params.n_estimators);
    for _ in 0..params.n_estimators {
        let grads: Vec<f64> = yhat.iter().zip(y).map(|(p, t)| p - t).collect();
        let mut nodes = Vec::new();
        grow_tree(
            &grads,
            &hess,
            &features,
            (0..n).collect(),
            0,
            params,
            &mut nodes,
        );
        let tree = RegressionTree { nodes };
        for (i, row) in rows.iter().enumerate() {
            yhat[i] += params.learning_rate * tree.predict_row(row);
        }
        trees.push(tree);
    }
    Ok(GbmModel {
        params: params.clone(),
        columns: columns.to_vec(),
        base_score: base,
        learner: Learner::Trees(trees),
    })
}

/// Fit the linear booster: K rounds of cyclic coordinate descent on the
/// elastic-net Newton objective. Each coordinate step is
/// `soft_threshold(-sum(g_i x_ij) - lambda w_j, alpha) / (sum(x_ij^2) + lambda)`,
/// applied scaled by the learning rate; the unpenalized bias moves by
/// `-sum(g_i) / n`.
pub fn fit_linear_ensemble(
    rows: &[Vec<f64>],
    y: &[f64],
    columns: &[String],
    params: &GbmParams,
) -> Result<GbmModel, GbmError> {
    params.validate()?;
    check_inputs(rows, y)?;
    let n = y.len();
    let d = columns.len();
    let features = to_columns(rows, d);
    let sq_norms: Vec<f64> = features
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>())
        .collect();
    let base = params
        .base_score
        .unwrap_or_else(|| y.iter().sum::<f64>() / n as f64);
    let mut yhat = vec![base; n];
    let mut weights = vec![0.0; d];
    let mut bias = 0.0;
    for _ in 0..params.n_estimators {
        let grad_sum: f64 = yhat.iter().zip(y).map(|(p, t)| p - t).sum();
        let delta_bias = params.learning_rate * (-grad_sum / n as f64);
        bias += delta_bias;
        for v in yhat.iter_mut() {
            *v += delta_bias;
        }
        for j in 0..d {
            let grad_dot: f64 = features[j]
                .iter()
                .zip(yhat.iter().zip(y))
                .map(|(x, (p, t))| x * (p - t))
                .sum();
            let numer = soft_threshold(-grad_dot - params.reg_lambda * weights[j], params.reg_alpha);
            let delta = params.learning_rate * numer / (sq_norms[j] + params.reg_lambda);
            if delta != 0.0 {
                weights[j] += delta;
                for (v, x) in yhat.iter_mut().zip(&features[j]) {
                    *v += delta * x;
                }
            }
        }
    }
    Ok(GbmModel {
        params: params.clone(),
        columns: columns.to_vec(),
        base_score: base,
        learner: Learner::Linear { weights, bias },
    })
}

pub fn fit(
    rows: &[Vec<f64>],
    y: &[f64],
    columns: &[String],
    params: &GbmParams,
) -> Result<GbmModel, GbmError> {
    match params.booster {
        BoosterKind::Tree => fit_tree_ensemble(rows, y, columns, params),
        BoosterKind::Linear => fit_linear_ensemble(rows, y, columns, params),
    }
}

impl GbmModel {
    pub fn predict_row(&self, row: &[f64]) -> Result<f64, GbmError> {
        if row.len() != self.columns.len() {
            return Err(GbmError::ColumnMismatch {
                expected: self.columns.len(),
                got: row.len(),
            });
        }
        Ok(match &self.learner {
            Learner::Trees(trees) => {
                self.base_score
                    + self.params.learning_rate
                        * trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
            }
            Learner::Linear { weights, bias } => {
                self.base_score + bias + weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
            }
        })
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, GbmError> {
        rows.iter().map(|r| self.predict_row(r)).collect()
    }

    /// Prediction using only the first `k` boosting rounds (trees only).
    pub fn predict_row_prefix(&self, row: &[f64], k: usize) -> Result<f64, GbmError> {
        match &self.learner {
            Learner::Trees(trees) => {
                if row.len() != self.columns.len() {
                    return Err(GbmError::ColumnMismatch {
                        expected: self.columns.len(),
                        got: row.len(),
                    });
                }
                Ok(self.base_score
                    + self.params.learning_rate
                        * trees
                            .iter()
                            .take(k)
                            .map(|t| t.predict_row(row))
                            .sum::<f64>())
            }
            Learner::Linear { .. } => self.predict_row(row),
        }
    }
}
