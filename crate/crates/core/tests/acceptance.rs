//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `--nocapture`) and asserting its stated tolerance and
//! runtime budget. Oracles here are implemented independently of the
//! library code paths they check.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ir_core::autoencoder::{self, Autoencoder, MlpSpec};
use ir_core::domain::{classify_value, compute_homa_ir, IrClass, IrThresholds};
use ir_core::explain::{tree_shap_values, ShapVector};
use ir_core::featureset::{build_design_matrix, feature_set_by_name};
use ir_core::gbm::{
    fit_linear_ensemble, fit_tree_ensemble, BoosterKind, GbmModel, GbmParams, Learner,
    RegressionTree, TreeNode,
};
use ir_core::metrics::ranking_curves;
use ir_core::pipeline::{
    make_folds, run_experiment, run_experiment_grid, train_fold, ExperimentSpec, ModelScheme,
};
use ir_core::synthcohort::{
    generate_functional_cohort, generate_synthetic_cohort, CohortCalibration, FunctionalSpec,
    PlantedViolations,
};

/// Runtime budgets are part of the criteria; debug builds get headroom
/// since the stated limits describe the optimized artifact.
fn budget(seconds: f64) -> f64 {
    if cfg!(debug_assertions) {
        seconds * 20.0
    } else {
        seconds
    }
}

fn report(criterion: usize, name: &str, started: Instant, limit_s: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    println!("ACCEPTANCE {criterion:2} {name}: PASS ({elapsed:.2}s, limit {limit_s}s)");
    assert!(
        elapsed < budget(limit_s),
        "criterion {criterion} exceeded its runtime budget: {elapsed:.2}s > {limit_s}s"
    );
}

fn cols(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("f{i}")).collect()
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_homa_formula_and_boundaries() {
    let started = Instant::now();
    let h = compute_homa_ir(10.0, 90.0).unwrap().value();
    assert!((h - 2.2222222222222223).abs() < 1e-12);
    assert!((h - 900.0 / 405.0).abs() < 1e-15);

    let t = IrThresholds::default();
    assert_eq!(classify_value(1.4999, &t).unwrap(), IrClass::InsulinSensitive);
    assert_eq!(
        classify_value(1.5, &t).unwrap(),
        IrClass::ImpairedSensitivity
    );
    assert_eq!(
        classify_value(2.8999, &t).unwrap(),
        IrClass::ImpairedSensitivity
    );
    assert_eq!(classify_value(2.9, &t).unwrap(), IrClass::InsulinResistant);
    report(1, "homa-ir formula and class boundaries", started, 1.0);
}

// ---------------------------------------------------------------- 2

/// Brute-force booster: enumerates every (feature, midpoint) split per
/// node directly, with the same gain formula, tie order, and leaf
/// shrinkage as the contract requires.
#[derive(Debug)]
enum BfNode {
    Leaf {
        weight: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<BfNode>,
        right: Box<BfNode>,
    },
}

fn bf_leaf_weight(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    -(g.signum() * (g.abs() - alpha).max(0.0)) / (h + lambda)
}

#[allow(clippy::too_many_arguments)]
fn bf_grow(
    rows: &[Vec<f64>],
    grads: &[f64],
    idx: &[usize],
    params: &GbmParams,
    depth: usize,
) -> BfNode {
    let g: f64 = idx.iter().map(|&i| grads[i]).sum();
    let h = idx.len() as f64;
    let half = |g: f64, h: f64| g * g / (h + params.reg_lambda);
    let mut best: Option<(f64, usize, f64)> = None; // gain, feature, threshold
    if depth < params.max_depth {
        let d = rows[0].len();
        for feature in 0..d {
            let mut values: Vec<f64> = idx.iter().map(|&i| rows[i][feature]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            values.dedup();
            for pair in values.windows(2) {
                let threshold = (pair[0] + pair[1]) / 2.0;
                let left: Vec<usize> = idx
                    .iter()
                    .copied()
                    .filter(|&i| rows[i][feature] < threshold)
                    .collect();
                let right: Vec<usize> = idx
                    .iter()
                    .copied()
                    .filter(|&i| rows[i][feature] >= threshold)
                    .collect();
                let hl = left.len() as f64;
                let hr = right.len() as f64;
                if hl < params.min_child_weight || hr < params.min_child_weight {
                    continue;
                }
                let gl: f64 = left.iter().map(|&i| grads[i]).sum();
                let gr: f64 = right.iter().map(|&i| grads[i]).sum();
                let gain =
                    0.5 * (half(gl, hl) + half(gr, hr) - half(g, h)) - params.gamma;
                if gain > best.map_or(0.0, |b| b.0) {
                    best = Some((gain, feature, threshold));
                }
            }
        }
    }
    match best {
        None => BfNode::Leaf {
            weight: bf_leaf_weight(g, h, params.reg_lambda, params.reg_alpha),
        },
        Some((_, feature, threshold)) => {
            let left_idx: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| rows[i][feature] < threshold)
                .collect();
            let right_idx: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| rows[i][feature] >= threshold)
                .collect();
            BfNode::Split {
                feature,
                threshold,
                left: Box::new(bf_grow(rows, grads, &left_idx, params, depth + 1)),
                right: Box::new(bf_grow(rows, grads, &right_idx, params, depth + 1)),
            }
        }
    }
}

fn bf_predict(node: &BfNode, row: &[f64]) -> f64 {
    match node {
        BfNode::Leaf { weight } => *weight,
        BfNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            if row[*feature] < *threshold {
                bf_predict(left, row)
            } else {
                bf_predict(right, row)
            }
        }
    }
}

fn bf_boost(rows: &[Vec<f64>], y: &[f64], params: &GbmParams) -> Vec<BfNode> {
    let base = params.base_score.expect("acceptance uses explicit base");
    let mut yhat = vec![base; y.len()];
    let mut trees = Vec::new();
    for _ in 0..params.n_estimators {
        let grads: Vec<f64> = yhat.iter().zip(y).map(|(p, t)| p - t).collect();
        let idx: Vec<usize> = (0..y.len()).collect();
        let tree = bf_grow(rows, &grads, &idx, params, 0);
        for (i, row) in rows.iter().enumerate() {
            yhat[i] += params.learning_rate * bf_predict(&tree, row);
        }
        trees.push(tree);
    }
    trees
}

fn assert_same_tree(arena: &RegressionTree, idx: usize, bf: &BfNode) {
    match (&arena.nodes[idx], bf) {
        (TreeNode::Leaf { weight, .. }, BfNode::Leaf { weight: bw }) => {
            assert!(
                (weight - bw).abs() < 1e-10,
                "leaf weight {weight} vs {bw}"
            );
        }
        (
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            },
            BfNode::Split {
                feature: bf_f,
                threshold: bf_t,
                left: bf_l,
                right: bf_r,
            },
        ) => {
            assert_eq!(feature, bf_f, "split feature differs");
            assert!((threshold - bf_t).abs() < 1e-10, "threshold differs");
            assert_same_tree(arena, *left, bf_l);
            assert_same_tree(arena, *right, bf_r);
        }
        (a, b) => panic!("structure mismatch: {a:?} vs {b:?}"),
    }
}

#[test]
fn criterion_02_tree_booster_matches_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let lambdas = [0.0, 0.5, 2.0];
    let alphas = [0.0, 0.3];
    let gammas = [0.0, 0.1];
    for case in 0..120 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=2);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let params = GbmParams {
            booster: BoosterKind::Tree,
            n_estimators: 3,
            learning_rate: 0.5,
            reg_lambda: lambdas[case % lambdas.len()],
            reg_alpha: alphas[case % alphas.len()],
            gamma: gammas[case % gammas.len()],
            max_depth: 1 + case % 2,
            min_child_weight: if case % 5 == 0 { 1.0 } else { 0.0 },
            base_score: Some(0.0),
            random_state: 0,
        };
        let model = fit_tree_ensemble(&rows, &y, &cols(d), &params).unwrap();
        let bf_trees = bf_boost(&rows, &y, &params);
        let trees = match &model.learner {
            Learner::Trees(t) => t,
            _ => unreachable!(),
        };
        assert_eq!(trees.len(), bf_trees.len());
        for (tree, bf) in trees.iter().zip(&bf_trees) {
            assert_same_tree(tree, 0, bf);
        }
    }
    report(2, "tree booster vs exhaustive split oracle", started, 30.0);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_linear_booster_matches_ridge() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..20 {
        let n = rng.gen_range(20..60);
        let d = rng.gen_range(1..=5);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let true_w: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                r.iter().zip(&true_w).map(|(x, w)| x * w).sum::<f64>()
                    + rng.gen_range(-0.3..0.3)
                    + 0.5
            })
            .collect();
        let lambda = [0.0, 0.3, 1.0][case % 3];
        let params = GbmParams {
            booster: BoosterKind::Linear,
            n_estimators: 3000,
            learning_rate: 0.6,
            reg_lambda: lambda,
            reg_alpha: 0.0,
            base_score: Some(0.0),
            ..GbmParams::default()
        };
        let model = fit_linear_ensemble(&rows, &y, &cols(d), &params).unwrap();
        let (weights, bias) = match &model.learner {
            Learner::Linear { weights, bias } => (weights.clone(), *bias),
            _ => unreachable!(),
        };

        // closed-form ridge with unpenalized intercept via the normal
        // equations, solved independently
        let mut a = nalgebra::DMatrix::<f64>::zeros(d + 1, d + 1);
        let mut b = nalgebra::DVector::<f64>::zeros(d + 1);
        for j in 0..d {
            for k in 0..d {
                a[(j, k)] = rows.iter().map(|r| r[j] * r[k]).sum::<f64>();
            }
            a[(j, j)] += lambda;
            a[(j, d)] = rows.iter().map(|r| r[j]).sum::<f64>();
            a[(d, j)] = a[(j, d)];
            b[j] = rows.iter().zip(&y).map(|(r, t)| r[j] * t).sum::<f64>();
        }
        a[(d, d)] = n as f64;
        b[d] = y.iter().sum::<f64>();
        let solution = a.lu().solve(&b).expect("ridge system solvable");
        for j in 0..d {
            assert!(
                (weights[j] - solution[j]).abs() < 1e-4,
                "case {case} w[{j}]: {} vs {}",
                weights[j],
                solution[j]
            );
        }
        assert!((bias - solution[d]).abs() < 1e-4, "case {case} bias");
    }
    report(3, "linear booster vs closed-form ridge", started, 10.0);
}

// ---------------------------------------------------------------- 4

/// Central finite differences over every parameter; biases randomized so
/// no ReLU pre-activation sits exactly on the kink.
fn fd_gradcheck(spec: &MlpSpec, batch: usize, lambda_sl: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Autoencoder::init(spec).unwrap();
    for layer in &mut model.layers {
        for b in &mut layer.biases {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    let xs: Vec<Vec<f64>> = (0..batch)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect()
        })
        .collect();
    let masks: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| autoencoder::mask_sample(x, 0.5, &mut rng).1)
        .collect();
    let (_, grads) = autoencoder::backward_gradients(&model, &xs, Some(&masks), lambda_sl);
    let loss_at =
        |m: &Autoencoder| autoencoder::backward_gradients(m, &xs, Some(&masks), lambda_sl).0;
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..model.layers.len() {
        for k in 0..model.layers[l].weights.len() {
            let mut plus = model.clone();
            plus.layers[l].weights[k] += step;
            let mut minus = model.clone();
            minus.layers[l].weights[k] -= step;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let g = grads.layers[l].weights[k];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
        }
        for k in 0..model.layers[l].biases.len() {
            let mut plus = model.clone();
            plus.layers[l].biases[k] += step;
            let mut minus = model.clone();
            minus.layers[l].biases[k] -= step;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let g = grads.layers[l].biases[k];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn criterion_04_autoencoder_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..10u64 {
        let d = rng.gen_range(3..7);
        let z = rng.gen_range(1..d.min(4));
        let hidden = if case % 2 == 0 {
            vec![rng.gen_range(3..8)]
        } else {
            vec![rng.gen_range(3..8), rng.gen_range(3..6)]
        };
        let spec = MlpSpec {
            input_dim: d,
            hidden,
            latent_dim: z,
            init_seed: case,
        };
        let lambda_sl = if case % 3 == 0 { 0.0 } else { 0.01 };
        let worst = fd_gradcheck(&spec, 3, lambda_sl, 1000 + case);
        assert!(worst < 1e-4, "config {case}: worst rel err {worst:.2e}");
    }
    report(4, "autoencoder gradcheck vs finite differences", started, 60.0);
}

// ---------------------------------------------------------------- 5

fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            total += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / total
}

/// Step-integration oracle for AUPRC: brute-force confusion counts at
/// every distinct threshold, descending.
fn auprc_step_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut auprc = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s >= t && **l)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s >= t && !**l)
            .count() as f64;
        let recall = tp / n_pos;
        let precision = tp / (tp + fp);
        auprc += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    auprc
}

#[test]
fn criterion_05_ranking_metrics_match_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..1000 {
        let n = rng.gen_range(4..60);
        // coarse score grid forces plenty of ties
        let levels = rng.gen_range(2..12);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos == 0 {
            labels[0] = true;
        } else if n_pos == n {
            labels[0] = false;
        }
        let curves = ranking_curves(&scores, &labels).unwrap();
        let oracle_auroc = auroc_pairwise(&scores, &labels);
        assert!(
            (curves.auroc - oracle_auroc).abs() < 1e-12,
            "case {case}: auroc {} vs {}",
            curves.auroc,
            oracle_auroc
        );
        let oracle_auprc = auprc_step_oracle(&scores, &labels);
        assert!(
            (curves.auprc - oracle_auprc).abs() < 1e-12,
            "case {case}: auprc {} vs {}",
            curves.auprc,
            oracle_auprc
        );
    }
    report(5, "auroc/auprc vs brute-force oracles", started, 30.0);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_test_fold_mutation_changes_nothing_fitted() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (files, _, _) =
        generate_functional_cohort(80, &FunctionalSpec::default(), 66, dir.path()).unwrap();
    let records = ir_core::ingest::load_cohort(&files).unwrap();

    for scheme in [ModelScheme::TreeDirect, ModelScheme::MaeThenLinear] {
        let fs = feature_set_by_name("wearables_demographics_glucose").unwrap();
        let mut spec = ExperimentSpec::new("leakage", fs, scheme);
        spec.gbm.n_estimators = 10;
        spec.ae.train.epochs = 20;
        spec.ae.latent_dim = 4;
        let matrix = build_design_matrix(
            &records,
            &spec.feature_set,
            spec.window_days,
            &spec.catalog,
        )
        .unwrap();
        let folds = make_folds(matrix.n_rows(), 5, spec.seeds[0]).unwrap();
        let train_idx: Vec<usize> =
            (0..matrix.n_rows()).filter(|&i| folds[i] != 0).collect();
        let baseline = train_fold(&matrix, &train_idx, &spec, 0, 92).unwrap();

        let mut corrupted = matrix.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(600);
        for i in 0..corrupted.n_rows() {
            if folds[i] == 0 {
                for v in corrupted.rows[i].iter_mut() {
                    *v = rng.gen_range(-1e3..1e3);
                }
                corrupted.targets[i] = rng.gen_range(-1e3..1e3);
            }
        }
        let mutated = train_fold(&corrupted, &train_idx, &spec, 0, 92).unwrap();
        // byte-level equality of everything fitted: standardizer,
        // autoencoder, booster
        assert_eq!(
            serde_json::to_vec(&baseline).unwrap(),
            serde_json::to_vec(&mutated).unwrap(),
            "{scheme:?}: fitted parameters changed after test-fold mutation"
        );
    }
    report(6, "leakage invariance of fitted parameters", started, 60.0);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_synthetic_cohort_reproduces_correlation_targets() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut calibration = CohortCalibration::default();
    calibration.wearable_days = 2; // person-level check, keep files small
    let (_, cohort) = generate_synthetic_cohort(
        5000,
        &calibration,
        777,
        dir.path(),
        &PlantedViolations::default(),
    )
    .unwrap();
    let homa = cohort.homa();
    for (name, &target) in &calibration.target_correlations {
        let xs = cohort.column(name);
        let r = ir_core::metrics::pearson(&xs, &homa)
            .unwrap()
            .r
            .unwrap();
        assert_eq!(
            r.signum(),
            target.signum(),
            "{name}: sign mismatch ({r:.3} vs {target:.3})"
        );
        assert!(
            (r - target).abs() < 0.05,
            "{name}: correlation {r:.3} outside {target:.3} +/- 0.05"
        );
    }
    report(7, "calibrated cohort correlation targets", started, 60.0);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_feature_ablation_ordering_on_functional_cohort() {
    let started = Instant::now();
    let feature_sets = [
        "wearables_demographics",
        "wearables_demographics_glucose",
        "wearables_demographics_lipid_metabolic",
    ];
    let mut r2: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut tp_base = 0usize;
    let mut tp_glucose = 0usize;
    // lipid terms strong enough that the lipid+metabolic panel carries
    // real signal beyond glucose alone
    let mut cohort_spec = FunctionalSpec::default();
    cohort_spec.coef_triglycerides = 0.008;
    cohort_spec.coef_hdl = -0.02;
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().unwrap();
        let (files, _, _) =
            generate_functional_cohort(300, &cohort_spec, 800 + seed, dir.path())
                .unwrap();
        let records = ir_core::ingest::load_cohort(&files).unwrap();
        for fs_name in feature_sets {
            let fs = feature_set_by_name(fs_name).unwrap();
            let mut spec = ExperimentSpec::new(fs_name, fs, ModelScheme::TreeDirect);
            spec.gbm.n_estimators = 40;
            spec.seeds = vec![seed, seed + 10, seed + 20, seed + 30, seed + 40];
            let result = run_experiment(&records, &spec).unwrap();
            r2.entry(fs_name)
                .or_default()
                .push(result.evaluation.pooled_regression.r2.unwrap());
            let tp = result.evaluation.pooled_counts.tp;
            if fs_name == "wearables_demographics" {
                tp_base += tp;
            } else if fs_name == "wearables_demographics_glucose" {
                tp_glucose += tp;
            }
        }
    }
    // one-sided sign test over 5 seeds: all five orderings must hold
    // (p = 2^-5 = 0.03125 < 0.05)
    for seed in 0..5 {
        let base = r2["wearables_demographics"][seed];
        let glucose = r2["wearables_demographics_glucose"][seed];
        let full = r2["wearables_demographics_lipid_metabolic"][seed];
        assert!(
            base < glucose,
            "seed {seed}: R2 base {base:.3} !< glucose {glucose:.3}"
        );
        assert!(
            glucose <= full,
            "seed {seed}: R2 glucose {glucose:.3} !<= full {full:.3}"
        );
    }
    assert!(
        tp_glucose > tp_base,
        "adding glucose did not increase correctly identified IR ({tp_glucose} vs {tp_base})"
    );
    report(8, "feature-set ablation ordering", started, 300.0);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_robustness_cv_and_consistency() {
    let started = Instant::now();

    // (a) exactly constant wearable series: zero CV, full consistency
    {
        let dir = tempfile::tempdir().unwrap();
        let mut spec_fn = FunctionalSpec::default();
        spec_fn.wearable_days = 56;
        let (files, _, _) = generate_functional_cohort(80, &spec_fn, 900, dir.path()).unwrap();
        let mut records = ir_core::ingest::load_cohort(&files).unwrap();
        // flatten each subject's series to its own first-day values
        for record in &mut records {
            let first = record.days[0].clone();
            for day in &mut record.days {
                day.rhr = first.rhr;
                day.hrv_rmssd = first.hrv_rmssd;
                day.steps = first.steps;
                day.sleep_minutes = first.sleep_minutes;
            }
        }
        let fs = feature_set_by_name("wearables_demographics").unwrap();
        let mut spec = ExperimentSpec::new("const", fs, ModelScheme::TreeDirect);
        spec.gbm.n_estimators = 20;
        let result = run_experiment(&records, &spec).unwrap();
        let (sweeps, consistency) = ir_core::robustness::sweep_experiment(
            &records,
            &result,
            IrThresholds::default(),
            7,
            None,
        )
        .unwrap();
        for sweep in &sweeps {
            assert!(sweep.entries.len() >= 2);
            assert_eq!(
                ir_core::robustness::per_individual_cv(sweep),
                Some(0.0),
                "{}: constant series must give exactly 0% CV",
                sweep.id
            );
        }
        assert_eq!(
            consistency.buckets.full, 1.0,
            "constant series must be 100% consistent"
        );
    }

    // (b) adding the constant glucose feature never raises the median CV
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().unwrap();
        let mut spec_fn = FunctionalSpec::default();
        spec_fn.wearable_days = 60;
        let (files, _, _) =
            generate_functional_cohort(120, &spec_fn, 910 + seed, dir.path()).unwrap();
        let records = ir_core::ingest::load_cohort(&files).unwrap();
        let mut medians = BTreeMap::new();
        for fs_name in ["wearables_demographics", "wearables_demographics_glucose"] {
            let fs = feature_set_by_name(fs_name).unwrap();
            let mut spec = ExperimentSpec::new(fs_name, fs, ModelScheme::TreeDirect);
            spec.gbm.n_estimators = 30;
            let result = run_experiment(&records, &spec).unwrap();
            let (sweeps, _) = ir_core::robustness::sweep_experiment(
                &records,
                &result,
                IrThresholds::default(),
                14,
                None,
            )
            .unwrap();
            let cvs: Vec<f64> = ir_core::robustness::sweep_cvs(&sweeps)
                .into_iter()
                .map(|(_, cv)| cv)
                .collect();
            medians.insert(
                fs_name,
                ir_core::metrics::median(&cvs).expect("sweeps produce CVs"),
            );
        }
        let base = medians["wearables_demographics"];
        let glucose = medians["wearables_demographics_glucose"];
        assert!(
            glucose <= base,
            "seed {seed}: median CV rose from {base:.3}% to {glucose:.3}% after adding glucose"
        );
    }
    report(9, "robustness CV and consistency behavior", started, 180.0);
}

// ---------------------------------------------------------------- 10

fn coalition_value(tree: &RegressionTree, row: &[f64], subset: u32, idx: usize) -> f64 {
    match &tree.nodes[idx] {
        TreeNode::Leaf { weight, .. } => *weight,
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            let cover_of = |i: usize| match &tree.nodes[i] {
                TreeNode::Leaf { cover, .. } => *cover,
                TreeNode::Split { cover, .. } => *cover,
            };
            if subset & (1 << feature) != 0 {
                let next = if row[*feature] < *threshold {
                    *left
                } else {
                    *right
                };
                coalition_value(tree, row, subset, next)
            } else {
                (cover_of(*left) * coalition_value(tree, row, subset, *left)
                    + cover_of(*right) * coalition_value(tree, row, subset, *right))
                    / cover
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product::<f64>().max(1.0)
}

fn brute_force_shap(model: &GbmModel, row: &[f64]) -> ShapVector {
    let trees = match &model.learner {
        Learner::Trees(t) => t,
        _ => panic!("tree model expected"),
    };
    let d = row.len();
    let eta = model.params.learning_rate;
    let mut values = vec![0.0; d];
    let mut base = model.base_score;
    for tree in trees {
        base += eta * coalition_value(tree, row, 0, 0);
        for (j, value) in values.iter_mut().enumerate() {
            for subset in 0..(1u32 << d) {
                if subset & (1 << j) != 0 {
                    continue;
                }
                let s = subset.count_ones() as usize;
                let weight = factorial(s) * factorial(d - s - 1) / factorial(d);
                let with = coalition_value(tree, row, subset | (1 << j), 0);
                let without = coalition_value(tree, row, subset, 0);
                *value += eta * weight * (with - without);
            }
        }
    }
    ShapVector {
        base_value: base,
        values,
    }
}

#[test]
fn criterion_10_shap_local_accuracy_and_exactness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|r| r[0] * 2.0 - r[1] + 0.5 * r[2] * r[3])
        .collect();
    let params = GbmParams {
        booster: BoosterKind::Tree,
        n_estimators: 8,
        learning_rate: 0.3,
        max_depth: 3,
        reg_lambda: 0.5,
        ..GbmParams::default()
    };
    let model = fit_tree_ensemble(&rows, &y, &cols(4), &params).unwrap();

    // local accuracy on 1000 random inputs
    for _ in 0..1000 {
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let shap = tree_shap_values(&model, &row).unwrap();
        let pred = model.predict_row(&row).unwrap();
        assert!(
            (shap.total() - pred).abs() < 1e-8,
            "local accuracy violated: {} vs {pred}",
            shap.total()
        );
    }

    // exact equality with coalition enumeration on <= 4 features
    for row in rows.iter().take(20) {
        let fast = tree_shap_values(&model, row).unwrap();
        let slow = brute_force_shap(&model, row);
        assert!((fast.base_value - slow.base_value).abs() < 1e-9);
        for (a, b) in fast.values.iter().zip(&slow.values) {
            assert!((a - b).abs() < 1e-9, "shap {a} vs oracle {b}");
        }
    }
    report(10, "shap local accuracy and coalition oracle", started, 60.0);
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_grid_outputs_byte_identical_across_runs() {
    let started = Instant::now();
    let data_dir = tempfile::tempdir().unwrap();
    let (files, _, _) =
        generate_functional_cohort(120, &FunctionalSpec::default(), 1100, data_dir.path())
            .unwrap();
    let records = ir_core::ingest::load_cohort(&files).unwrap();
    let (records, _) =
        ir_core::ingest::apply_quality_control(&records, &ir_core::ingest::QcConfig::default());

    let mut specs = Vec::new();
    for (fs_name, scheme) in [
        ("demographics", ModelScheme::TreeDirect),
        ("wearables_demographics", ModelScheme::TreeDirect),
        ("wearables_demographics_glucose", ModelScheme::LinearDirect),
        ("wearables_demographics", ModelScheme::MaeThenLinear),
    ] {
        let fs = feature_set_by_name(fs_name).unwrap();
        let mut spec = ExperimentSpec::new(
            &format!("{}_{}", fs_name, spec_label(scheme)),
            fs,
            scheme,
        );
        spec.gbm.n_estimators = 15;
        spec.ae.train.epochs = 30;
        spec.ae.latent_dim = 4;
        specs.push(spec);
    }

    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    for out in [&out1, &out2] {
        let layout = ir_core::artifacts::OutputLayout::new(out.path());
        let cells = run_experiment_grid(&records, &specs);
        for cell in &cells {
            if let Ok(result) = &cell.outcome {
                ir_core::artifacts::write_experiment_outputs(
                    &layout,
                    result,
                    IrThresholds::default(),
                )
                .unwrap();
            }
        }
        ir_core::artifacts::write_grid_summary(&layout, &cells).unwrap();
        ir_core::artifacts::write_grid_comparisons(&layout, &cells).unwrap();
    }

    let mut compared = 0;
    for entry in walk_files(out1.path()) {
        let rel = entry.strip_prefix(out1.path()).unwrap();
        if rel.file_name().and_then(|n| n.to_str()) == Some("run_meta.json") {
            continue;
        }
        let a = std::fs::read(&entry).unwrap();
        let b = std::fs::read(out2.path().join(rel))
            .unwrap_or_else(|_| panic!("missing {rel:?} in rerun"));
        assert_eq!(a, b, "artifact {rel:?} differs between identical runs");
        compared += 1;
    }
    assert!(compared >= 10, "expected a full artifact tree, saw {compared}");
    report(11, "grid reruns byte-identical", started, 600.0);
}

fn spec_label(scheme: ModelScheme) -> &'static str {
    match scheme {
        ModelScheme::TreeDirect => "tree",
        ModelScheme::LinearDirect => "linear",
        ModelScheme::AeThenLinear => "ae",
        ModelScheme::MaeThenLinear => "mae",
    }
}

fn walk_files(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------- 12

/// Literal Benjamini-Hochberg definition: adjusted p at sorted rank i is
/// min over j >= i of m * p_(j) / (j+1), capped at 1.
fn bh_literal(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
    let mut out = vec![0.0; m];
    for (i, &idx) in order.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, &jdx) in order.iter().enumerate().skip(i) {
            best = best.min(m as f64 * p[jdx] / (j + 1) as f64);
        }
        out[idx] = best.min(1.0);
    }
    out
}

#[test]
fn criterion_12_statistics_match_definitions() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1212);

    for case in 0..100 {
        let m = rng.gen_range(1..25);
        let p: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let ours = ir_core::stats::benjamini_hochberg(&p).unwrap();
        let literal = bh_literal(&p);
        for (a, b) in ours.iter().zip(&literal) {
            assert!((a - b).abs() < 1e-12, "case {case}: BH {a} vs {b}");
        }
    }

    // n1 = n2 = 10: the largest size the exact-enumeration gate covers;
    // at n = 8 the continuity-corrected normal approximation itself has
    // inherent error slightly above 0.01
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let n1 = 10;
        let n2 = 10;
        let shift = rng.gen_range(-1.0..1.0);
        let a: Vec<f64> = (0..n1).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.gen::<f64>() + shift).collect();
        let exact = ir_core::stats::wilcoxon_rank_sum_exact(&a, &b).unwrap();
        let normal = ir_core::stats::wilcoxon_rank_sum_normal(&a, &b).unwrap();
        worst = worst.max((exact.p_value - normal.p_value).abs());
    }
    assert!(
        worst < 0.01,
        "normal approximation drifted {worst:.4} from exact enumeration"
    );
    report(12, "benjamini-hochberg and wilcoxon agreement", started, 30.0);
}

// ---------------------------------------------------------------- 13

#[test]
fn criterion_13_tools_round_trip_and_fuzz() {
    use ir_core::model_io::ModelBundle;
    use ir_core::tools::{dispatch_line, tool_dispatch, ToolRequest, Toolbox, PREDICTION_TOOLS};
    let started = Instant::now();

    // frozen models for all four prediction tools
    let dir = tempfile::tempdir().unwrap();
    let (files, _, _) =
        generate_functional_cohort(60, &FunctionalSpec::default(), 1300, dir.path()).unwrap();
    let records = ir_core::ingest::load_cohort(&files).unwrap();
    let mut toolbox = Toolbox::new(IrThresholds::default());
    let tool_feature_sets = [
        ("predict_demographics_only", "demographics"),
        ("predict_wearables_demographics", "wearables_demographics"),
        (
            "predict_wearables_demographics_glucose",
            "wearables_demographics_glucose",
        ),
        (
            "predict_wearables_demographics_lipid_metabolic",
            "wearables_demographics_lipid_metabolic",
        ),
    ];
    let mut feature_rows: BTreeMap<&str, BTreeMap<String, serde_json::Value>> = BTreeMap::new();
    for (tool, fs_name) in tool_feature_sets {
        let fs = feature_set_by_name(fs_name).unwrap();
        let mut spec = ExperimentSpec::new(fs_name, fs, ModelScheme::TreeDirect);
        spec.gbm.n_estimators = 5;
        let result = run_experiment(&records, &spec).unwrap();
        let bundle = ModelBundle::from_fold(&result, 0, IrThresholds::default());
        // a valid feature map straight from the design matrix
        let matrix = build_design_matrix(
            &records,
            &spec.feature_set,
            spec.window_days,
            &spec.catalog,
        )
        .unwrap();
        let row: BTreeMap<String, serde_json::Value> = matrix
            .columns
            .iter()
            .zip(&matrix.rows[0])
            .map(|(c, v)| (c.clone(), serde_json::json!(v)))
            .collect();
        feature_rows.insert(tool, row);
        toolbox.register(tool, bundle);
    }

    // every tool round-trips a valid request
    let valid: Vec<ToolRequest> = vec![
        ToolRequest {
            tool: "homa_ir_calculator".into(),
            args: serde_json::from_value(serde_json::json!({"insulin": 10, "glucose": 90}))
                .unwrap(),
        },
        ToolRequest {
            tool: "comparison_arithmetic".into(),
            args: serde_json::from_value(serde_json::json!({"a": 2.0, "b": 2.5})).unwrap(),
        },
        ToolRequest {
            tool: "percent_change".into(),
            args: serde_json::from_value(serde_json::json!({"from": 2.0, "to": 2.5})).unwrap(),
        },
    ];
    for req in &valid {
        let resp = tool_dispatch(req, &toolbox);
        assert!(resp.ok, "{}: {:?}", req.tool, resp.error);
    }
    for tool in PREDICTION_TOOLS {
        let req = ToolRequest {
            tool: tool.into(),
            args: feature_rows[tool].clone(),
        };
        let resp = tool_dispatch(&req, &toolbox);
        assert!(resp.ok, "{tool}: {:?}", resp.error);
        let a = resp.result.clone();
        let again = tool_dispatch(&req, &toolbox);
        assert_eq!(a, again.result, "{tool} is not deterministic");
    }

    // 1000 malformed requests: structured errors, zero crashes
    let mut rng = ChaCha8Rng::seed_from_u64(13000);
    let fragments = [
        "{", "}", "[1,2", "null", "true", "3.14", "\"tool\"",
        "{\"tool\":", "{\"tool\": 7}", "{\"args\": {}}",
        "{\"tool\": \"homa_ir_calculator\", \"args\": []}",
        "{\"tool\": \"homa_ir_calculator\", \"bogus\": 1}",
        "{\"tool\": \"predict_demographics_only\", \"args\": {\"bmi\": \"big\"}}",
        "{\"tool\": \"nope\", \"args\": {}}",
    ];
    for i in 0..1000 {
        let line = if i % 3 == 0 {
            // random byte noise
            let len = rng.gen_range(0..40);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen_range(32..127)).collect();
            String::from_utf8(bytes).unwrap()
        } else if i % 3 == 1 {
            fragments[rng.gen_range(0..fragments.len())].to_string()
        } else {
            // structurally valid JSON, wrong shape or arguments
            format!(
                "{{\"tool\": \"{}\", \"args\": {{\"x{}\": {}}}}}",
                ["homa_ir_calculator", "percent_change", "ghost_tool"]
                    [rng.gen_range(0..3)],
                rng.gen_range(0..5),
                rng.gen::<f64>()
            )
        };
        let resp = dispatch_line(&line, &toolbox);
        if !resp.ok {
            assert!(resp.error.is_some(), "failure without a structured error");
        }
    }
    report(13, "tool protocol round-trips and fuzz", started, 30.0);
}
