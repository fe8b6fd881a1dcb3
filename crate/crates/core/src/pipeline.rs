//! Experiment orchestration: cross-validation splitting, the direct and
//! representation-learning modeling schemes, thresholded classification,
//! the experiment grid, and the frozen-model prediction path.
//!
//! Nothing fitted (standardizer, autoencoder, booster) ever sees a
//! test-fold row; insulin is never a feature.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{train_autoencoder, Autoencoder, MaeTrainConfig, MlpSpec, TrainError};
use crate::domain::{classify_value, IrClass, IrThresholds, ParticipantRecord};
use crate::featureset::{
    apply_standardizer_row, build_design_matrix, fit_standardizer, DesignMatrix, FeatureError,
    FeatureSetSpec, PanelCatalog, StandardizerParams,
};
use crate::gbm::{fit as fit_gbm, BoosterKind, GbmError, GbmModel, GbmParams};
use crate::metrics::{evaluate_predictions, EvaluationReport, MetricError};

/// Random seeds used across the experiment grid; seed i drives fold i's
/// model training, and the first seed drives the fold shuffle.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 92, 1, 2024, 12121];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gbm(#[from] GbmError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{n} rows cannot be split into {k} folds")]
    TooFewRows { n: usize, k: usize },
    #[error("leave-one-out cross-validation is only supported for direct regression schemes")]
    LoocvWithRepresentation,
    #[error("experiment needs at least one seed")]
    NoSeeds,
    #[error("input rows are missing required columns: {columns:?}")]
    MissingColumns { columns: Vec<String> },
    #[error("classification failed: {0}")]
    Domain(#[from] crate::domain::DomainError),
}

/// Modeling scheme: direct regression on features, or an autoencoder /
/// masked autoencoder representation feeding a linear booster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScheme {
    TreeDirect,
    LinearDirect,
    AeThenLinear,
    MaeThenLinear,
}

impl ModelScheme {
    pub fn uses_autoencoder(&self) -> bool {
        matches!(self, ModelScheme::AeThenLinear | ModelScheme::MaeThenLinear)
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModelScheme::TreeDirect => "tree_direct",
            ModelScheme::LinearDirect => "linear_direct",
            ModelScheme::AeThenLinear => "ae_then_linear",
            ModelScheme::MaeThenLinear => "mae_then_linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvScheme {
    KFold5,
    LeaveOneOut,
}

impl CvScheme {
    pub fn fold_count(&self, n: usize) -> usize {
        match self {
            CvScheme::KFold5 => 5,
            CvScheme::LeaveOneOut => n,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CvScheme::KFold5 => "kfold5",
            CvScheme::LeaveOneOut => "loocv",
        }
    }
}

/// Autoencoder settings for the representation schemes. `hidden` empty
/// means the default one-hidden-layer architecture; the latent dimension
/// is clamped below the feature count when a small feature set would
/// otherwise make the bottleneck vacuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeSettings {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub train: MaeTrainConfig,
}

impl Default for AeSettings {
    fn default() -> Self {
        AeSettings {
            latent_dim: 8,
            hidden: Vec::new(),
            train: MaeTrainConfig::default(),
        }
    }
}

/// One experiment: a feature set, an aggregation window, a modeling
/// scheme, and a cross-validation plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub feature_set: FeatureSetSpec,
    pub window_days: u32,
    pub scheme: ModelScheme,
    pub cv: CvScheme,
    pub seeds: Vec<u64>,
    pub thresholds: IrThresholds,
    pub gbm: GbmParams,
    pub ae: AeSettings,
    pub stratified_folds: bool,
    pub catalog: PanelCatalog,
}

impl ExperimentSpec {
    pub fn new(name: &str, feature_set: FeatureSetSpec, scheme: ModelScheme) -> Self {
        let booster = match scheme {
            ModelScheme::TreeDirect => BoosterKind::Tree,
            _ => BoosterKind::Linear,
        };
        ExperimentSpec {
            name: name.to_string(),
            feature_set,
            window_days: 7,
            scheme,
            cv: CvScheme::KFold5,
            seeds: DEFAULT_SEEDS.to_vec(),
            thresholds: IrThresholds::default(),
            gbm: GbmParams {
                booster,
                ..GbmParams::default()
            },
            ae: AeSettings::default(),
            stratified_folds: false,
            catalog: PanelCatalog::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seeds.is_empty() {
            return Err(PipelineError::NoSeeds);
        }
        if self.cv == CvScheme::LeaveOneOut && self.scheme.uses_autoencoder() {
            return Err(PipelineError::LoocvWithRepresentation);
        }
        Ok(())
    }
}

/// Seeded uniform shuffle followed by contiguous chunking; fold sizes
/// differ by at most one. Returns the fold index of each item.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>, PipelineError> {
    if k < 2 || n < k {
        return Err(PipelineError::TooFewRows { n, k });
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n];
    let base = n / k;
    let extra = n % k;
    let mut cursor = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &item in &order[cursor..cursor + size] {
            assignment[item] = fold;
        }
        cursor += size;
    }
    Ok(assignment)
}

/// Stratified variant: shuffles and chunks within each class.
pub fn make_stratified_folds(
    classes: &[IrClass],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, PipelineError> {
    let n = classes.len();
    if k < 2 || n < k {
        return Err(PipelineError::TooFewRows { n, k });
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; n];
    let mut offset = 0usize;
    for class in [
        IrClass::InsulinSensitive,
        IrClass::ImpairedSensitivity,
        IrClass::InsulinResistant,
    ] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| classes[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, &item) in idx.iter().enumerate() {
            assignment[item] = (offset + pos) % k;
        }
        offset += idx.len();
    }
    Ok(assignment)
}

/// One participant's pooled test-set prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub y_true: f64,
    pub y_pred: f64,
    pub fold: usize,
    pub class_true: IrClass,
    pub class_pred: IrClass,
}

/// Exactly one test prediction per retained participant.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn y_true(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y_true).collect()
    }

    pub fn y_pred(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y_pred).collect()
    }

    pub fn folds(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.fold).collect()
    }

    pub fn class_true(&self) -> Vec<IrClass> {
        self.records.iter().map(|r| r.class_true).collect()
    }

    pub fn class_pred(&self) -> Vec<IrClass> {
        self.records.iter().map(|r| r.class_pred).collect()
    }
}

/// Everything fitted on one training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldModel {
    pub fold: usize,
    pub standardizer: StandardizerParams,
    pub autoencoder: Option<Autoencoder>,
    pub gbm: GbmModel,
}

impl FoldModel {
    /// Predict from a raw (unstandardized) row laid out in the design
    /// matrix column order.
    pub fn predict_raw_row(
        &self,
        raw_columns: &[String],
        row: &[f64],
    ) -> Result<f64, PipelineError> {
        let std_row = apply_standardizer_row(&self.standardizer, raw_columns, row)?;
        let features = match &self.autoencoder {
            Some(ae) => ae.encode_row(&std_row)?,
            None => std_row,
        };
        Ok(self.gbm.predict_row(&features)?)
    }
}

/// Result of one experiment: pooled predictions, per-fold models, and
/// the evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub feature_set: String,
    pub window_days: u32,
    pub scheme: String,
    pub cv: String,
    pub raw_columns: Vec<String>,
    pub predictions: PredictionSet,
    pub fold_models: Vec<FoldModel>,
    pub evaluation: EvaluationReport,
}

fn embedding_columns(z: usize) -> Vec<String> {
    (0..z).map(|i| format!("z{i}")).collect()
}

/// Fit one fold's standardizer, optional autoencoder, and booster using
/// only the rows in `train_idx`.
pub fn train_fold(
    matrix: &DesignMatrix,
    train_idx: &[usize],
    spec: &ExperimentSpec,
    fold: usize,
    seed: u64,
) -> Result<FoldModel, PipelineError> {
    let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| matrix.rows[i].clone()).collect();
    let train_y: Vec<f64> = train_idx.iter().map(|&i| matrix.targets[i]).collect();
    let standardizer = fit_standardizer(&train_rows, &matrix.columns)?;
    let std_train: Vec<Vec<f64>> = train_rows
        .iter()
        .map(|r| apply_standardizer_row(&standardizer, &matrix.columns, r))
        .collect::<Result<_, _>>()?;

    let mut gbm_params = spec.gbm.clone();
    gbm_params.random_state = seed;

    let (autoencoder, features, feature_columns) = if spec.scheme.uses_autoencoder() {
        let d = standardizer.columns.len();
        let latent = spec.ae.latent_dim.min(d.saturating_sub(1)).max(1);
        if latent != spec.ae.latent_dim {
            log::warn!(
                "clamping latent dim {} to {} for {}-column feature set",
                spec.ae.latent_dim,
                latent,
                d
            );
        }
        let mlp_spec = if spec.ae.hidden.is_empty() {
            MlpSpec::default_for(d, latent, seed)
        } else {
            MlpSpec {
                input_dim: d,
                hidden: spec.ae.hidden.clone(),
                latent_dim: latent,
                init_seed: seed,
            }
        };
        let mut train_cfg = spec.ae.train.clone();
        train_cfg.seed = seed;
        if spec.scheme == ModelScheme::AeThenLinear {
            train_cfg.mask_prob = 0.0;
        }
        let (ae, _) = train_autoencoder(&std_train, &mlp_spec, &train_cfg)?;
        let embedded = ae.encode(&std_train)?;
        let cols = embedding_columns(latent);
        gbm_params.booster = BoosterKind::Linear;
        (Some(ae), embedded, cols)
    } else {
        (None, std_train, standardizer.columns.clone())
    };

    let gbm = fit_gbm(&features, &train_y, &feature_columns, &gbm_params)?;
    Ok(FoldModel {
        fold,
        standardizer,
        autoencoder,
        gbm,
    })
}

/// Run one experiment end to end on quality-controlled records.
pub fn run_experiment(
    records: &[ParticipantRecord],
    spec: &ExperimentSpec,
) -> Result<ExperimentResult, PipelineError> {
    spec.validate()?;
    let matrix = build_design_matrix(records, &spec.feature_set, spec.window_days, &spec.catalog)?;
    run_experiment_on_matrix(&matrix, spec)
}

/// Run the cross-validation loop on a prepared design matrix.
pub fn run_experiment_on_matrix(
    matrix: &DesignMatrix,
    spec: &ExperimentSpec,
) -> Result<ExperimentResult, PipelineError> {
    spec.validate()?;
    let n = matrix.n_rows();
    let k = spec.cv.fold_count(n);
    let fold_seed = spec.seeds[0];
    let assignment = if spec.stratified_folds {
        let classes: Vec<IrClass> = matrix
            .targets
            .iter()
            .map(|&t| classify_value(t, &spec.thresholds))
            .collect::<Result<_, _>>()?;
        make_stratified_folds(&classes, k, fold_seed)?
    } else {
        make_folds(n, k, fold_seed)?
    };

    let mut fold_models = Vec::with_capacity(k);
    let mut records_out: Vec<Option<PredictionRecord>> = vec![None; n];
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
        let test_idx: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
        let seed = spec.seeds[fold % spec.seeds.len()];
        let model = train_fold(matrix, &train_idx, spec, fold, seed)?;
        for &i in &test_idx {
            let y_pred = model.predict_raw_row(&matrix.columns, &matrix.rows[i])?;
            let y_true = matrix.targets[i];
            records_out[i] = Some(PredictionRecord {
                id: matrix.ids[i].clone(),
                y_true,
                y_pred,
                fold,
                class_true: classify_value(y_true, &spec.thresholds)?,
                class_pred: classify_value(y_pred, &spec.thresholds)?,
            });
        }
        fold_models.push(model);
    }
    let predictions = PredictionSet {
        records: records_out.into_iter().map(|r| r.expect("fold cover")).collect(),
    };
    let evaluation = evaluate_predictions(
        &predictions.y_true(),
        &predictions.y_pred(),
        &predictions.class_true(),
        &predictions.class_pred(),
        &predictions.folds(),
        k,
    )?;
    Ok(ExperimentResult {
        name: spec.name.clone(),
        feature_set: spec.feature_set.name.clone(),
        window_days: spec.window_days,
        scheme: spec.scheme.label().to_string(),
        cv: spec.cv.label().to_string(),
        raw_columns: matrix.columns.clone(),
        predictions,
        fold_models,
        evaluation,
    })
}

/// One grid cell outcome; failures carry the error text so the grid can
/// continue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    pub outcome: Result<Box<ExperimentResult>, String>,
}

/// Run every experiment, in parallel, with deterministic output order.
pub fn run_experiment_grid(
    records: &[ParticipantRecord],
    specs: &[ExperimentSpec],
) -> Vec<GridCell> {
    specs
        .par_iter()
        .map(|spec| GridCell {
            name: spec.name.clone(),
            outcome: run_experiment(records, spec)
                .map(Box::new)
                .map_err(|e| e.to_string()),
        })
        .collect()
}

/// Pairwise model comparison on a shared participant set: Wilcoxon
/// rank-sum over per-fold metric values and McNemar over the paired
/// binary correctness of pooled predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub wilcoxon_p: Option<f64>,
    pub mcnemar_p: Option<f64>,
}

pub fn compare_cells(a: &ExperimentResult, b: &ExperimentResult) -> Vec<PairwiseComparison> {
    let mut out = Vec::new();
    for metric in ["auroc", "sensitivity", "specificity", "r2"] {
        let fold_values = |r: &ExperimentResult, m: &str| -> Vec<f64> {
            r.evaluation
                .per_fold
                .iter()
                .filter_map(|f| match m {
                    "auroc" => f.auroc,
                    "sensitivity" => f.classification.sensitivity,
                    "specificity" => f.classification.specificity,
                    "r2" => f.regression.r2,
                    _ => None,
                })
                .collect()
        };
        let va = fold_values(a, metric);
        let vb = fold_values(b, metric);
        let wilcoxon_p = crate::stats::wilcoxon_rank_sum(&va, &vb)
            .ok()
            .map(|r| r.p_value);
        // discordant pairs: participants one model classifies correctly
        // and the other does not
        let mcnemar_p = if metric == "auroc" {
            let correct = |r: &ExperimentResult| -> std::collections::BTreeMap<String, bool> {
                r.predictions
                    .records
                    .iter()
                    .map(|p| (p.id.clone(), p.class_pred.is_ir() == p.class_true.is_ir()))
                    .collect()
            };
            let ca = correct(a);
            let cb = correct(b);
            let mut b_count = 0;
            let mut c_count = 0;
            for (id, &a_ok) in &ca {
                if let Some(&b_ok) = cb.get(id) {
                    if a_ok && !b_ok {
                        b_count += 1;
                    } else if !a_ok && b_ok {
                        c_count += 1;
                    }
                }
            }
            Some(crate::stats::mcnemar(b_count, c_count).p_value)
        } else {
            None
        };
        out.push(PairwiseComparison {
            a: a.name.clone(),
            b: b.name.clone(),
            metric: metric.to_string(),
            wilcoxon_p,
            mcnemar_p,
        });
    }
    out
}

/// The paper's hyperparameter grids and a deterministic search over any
/// candidate list on a designated common experiment.
pub mod grids {
    use super::*;

    pub const REG_LAMBDA: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    pub const REG_ALPHA: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    pub const LINEAR_N_ESTIMATORS: [usize; 10] = [5, 10, 15, 25, 50, 85, 100, 125, 150, 200];
    pub const LINEAR_LEARNING_RATE: [f64; 15] = [
        0.01, 0.05, 0.09, 0.1, 0.15, 0.19, 0.21, 0.25, 0.29, 0.31, 0.35, 0.39, 0.41, 0.45, 0.51,
    ];
    pub const TREE_N_ESTIMATORS: [usize; 3] = [50, 100, 200];
    pub const TREE_LEARNING_RATE: [f64; 7] = [0.01, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5];
    pub const TREE_MAX_DEPTH: [usize; 5] = [1, 2, 3, 5, 7];

    pub fn linear_candidates() -> Vec<GbmParams> {
        let mut out = Vec::new();
        for &k in &LINEAR_N_ESTIMATORS {
            for &lr in &LINEAR_LEARNING_RATE {
                for &lambda in &REG_LAMBDA {
                    for &alpha in &REG_ALPHA {
                        out.push(GbmParams {
                            booster: BoosterKind::Linear,
                            n_estimators: k,
                            learning_rate: lr,
                            reg_lambda: lambda,
                            reg_alpha: alpha,
                            ..GbmParams::default()
                        });
                    }
                }
            }
        }
        out
    }

    pub fn tree_candidates() -> Vec<GbmParams> {
        let mut out = Vec::new();
        for &k in &TREE_N_ESTIMATORS {
            for &lr in &TREE_LEARNING_RATE {
                for &lambda in &REG_LAMBDA {
                    for &alpha in &REG_ALPHA {
                        for &depth in &TREE_MAX_DEPTH {
                            out.push(GbmParams {
                                booster: BoosterKind::Tree,
                                n_estimators: k,
                                learning_rate: lr,
                                reg_lambda: lambda,
                                reg_alpha: alpha,
                                max_depth: depth,
                                ..GbmParams::default()
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Evaluate each candidate on the common experiment; the winner is
    /// the highest pooled test R^2, ties broken by candidate order.
    pub fn grid_search(
        records: &[ParticipantRecord],
        base: &ExperimentSpec,
        candidates: &[GbmParams],
    ) -> Result<(usize, Vec<Option<f64>>), PipelineError> {
        let matrix =
            build_design_matrix(records, &base.feature_set, base.window_days, &base.catalog)?;
        let scores: Vec<Option<f64>> = candidates
            .par_iter()
            .map(|params| {
                let mut spec = base.clone();
                spec.gbm = params.clone();
                run_experiment_on_matrix(&matrix, &spec)
                    .ok()
                    .and_then(|r| r.evaluation.pooled_regression.r2)
            })
            .collect();
        let best = scores
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|v| (i, v)))
            .max_by(|(ia, va), (ib, vb)| va.partial_cmp(vb).unwrap().then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .ok_or(PipelineError::TooFewRows {
                n: 0,
                k: candidates.len(),
            })?;
        Ok((best, scores))
    }
}
