//! Synthetic desk-scale cohorts.
//!
//! Two generators share the three-file CSV layout the ingestion module
//! reads:
//!
//! * a distribution-calibrated cohort: a latent Gaussian copula whose
//!   per-variable marginal transforms are inverted numerically
//!   (Gauss-Hermite quadrature + bisection) so the post-transform
//!   Pearson correlations with HOMA-IR hit their targets;
//! * a functional cohort where HOMA-IR is an exact known function of the
//!   features plus Gaussian noise, for end-to-end accuracy oracles.
//!
//! Insulin is always back-solved from sampled HOMA-IR and glucose, so
//! the ground-truth formula round-trips through ingestion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::ingest::CohortFiles;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("correlation matrix is not positive semi-definite after repair")]
    NotPsd,
    #[error("cohort size {n} is below the minimum {min}")]
    TooSmall { n: usize, min: usize },
    #[error("unknown calibration variable '{name}'")]
    UnknownVariable { name: String },
}

/// Marginal distribution reached through the standard-normal latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    /// Normal re-centered on the target median, truncated to [lo, hi].
    TruncNormal { median: f64, sd: f64, lo: f64, hi: f64 },
    /// exp(mu + sigma Z).
    LogNormal { mu: f64, sigma: f64 },
}

impl Marginal {
    /// Transform a standard-normal draw into the marginal.
    pub fn transform(&self, z: f64) -> f64 {
        match *self {
            Marginal::LogNormal { mu, sigma } => (mu + sigma * z).exp(),
            Marginal::TruncNormal { median, sd, lo, hi } => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let a = normal.cdf((lo - median) / sd);
                let b = normal.cdf((hi - median) / sd);
                let u = a + normal.cdf(z) * (b - a);
                median + sd * normal.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12))
            }
        }
    }
}

/// Gauss-Hermite nodes and weights via the Golub-Welsch tridiagonal
/// eigenproblem.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

struct MarginalMoments {
    mean: f64,
    std: f64,
}

fn marginal_moments(t: &Marginal, gh: &(Vec<f64>, Vec<f64>)) -> MarginalMoments {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut mean = 0.0;
    let mut mean_sq = 0.0;
    for (x, w) in gh.0.iter().zip(&gh.1) {
        let v = t.transform(std::f64::consts::SQRT_2 * x);
        mean += w * v;
        mean_sq += w * v * v;
    }
    mean /= sqrt_pi;
    mean_sq /= sqrt_pi;
    MarginalMoments {
        mean,
        std: (mean_sq - mean * mean).max(1e-300).sqrt(),
    }
}

/// Pearson correlation of the transformed pair when the latent pair has
/// correlation `rho`, by 2-D Gauss-Hermite quadrature.
fn transformed_corr(t1: &Marginal, t2: &Marginal, rho: f64, gh: &(Vec<f64>, Vec<f64>)) -> f64 {
    let m1 = marginal_moments(t1, gh);
    let m2 = marginal_moments(t2, gh);
    let pi = std::f64::consts::PI;
    let mut e12 = 0.0;
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    for (xi, wi) in gh.0.iter().zip(&gh.1) {
        let z1 = std::f64::consts::SQRT_2 * xi;
        let v1 = t1.transform(z1);
        for (xj, wj) in gh.0.iter().zip(&gh.1) {
            let z2 = std::f64::consts::SQRT_2 * (rho * xi + s * xj);
            e12 += wi * wj * v1 * t2.transform(z2);
        }
    }
    e12 /= pi;
    (e12 - m1.mean * m2.mean) / (m1.std * m2.std)
}

/// Latent correlation that yields the target Pearson correlation after
/// both marginal transforms, by bisection.
fn invert_corr(t1: &Marginal, t2: &Marginal, target: f64, gh: &(Vec<f64>, Vec<f64>)) -> f64 {
    let (mut lo, mut hi) = (-0.999, 0.999);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if transformed_corr(t1, t2, mid, gh) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Clip negative eigenvalues and restore the unit diagonal until the
/// matrix is positive definite.
fn nearest_psd(mut m: DMatrix<f64>) -> Result<DMatrix<f64>, SynthError> {
    for _ in 0..20 {
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        if eig.eigenvalues.iter().all(|&v| v > 1e-10) {
            return Ok(m);
        }
        let clipped = DVector::from_iterator(
            eig.eigenvalues.len(),
            eig.eigenvalues.iter().map(|&v| v.max(1e-8)),
        );
        let v = &eig.eigenvectors;
        m = v * DMatrix::from_diagonal(&clipped) * v.transpose();
        for i in 0..m.nrows() {
            let d = m[(i, i)].sqrt();
            for j in 0..m.nrows() {
                m[(i, j)] /= d;
                m[(j, i)] /= d;
            }
            m[(i, i)] = 1.0;
        }
    }
    Err(SynthError::NotPsd)
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Correlated variables in the copula core, in matrix order after the
/// HOMA-IR outcome at index 0.
pub const COPULA_VARIABLES: [&str; 8] = [
    "glucose",
    "bmi",
    "hba1c",
    "triglycerides",
    "rhr",
    "hdl",
    "steps",
    "hrv_rmssd",
];

/// Target Pearson correlations with HOMA-IR and the class-fraction
/// calibration of the HOMA-IR marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortCalibration {
    /// variable name -> target correlation with HOMA-IR
    pub target_correlations: BTreeMap<String, f64>,
    /// (P(class IS), P(class ImpairedIS)); the IR fraction is the rest
    pub class_fractions: (f64, f64),
    /// latent correlation between feature pairs (sign-consistent)
    pub cross_feature_latent: f64,
    /// wearable history length before the blood draw
    pub wearable_days: u32,
}

impl Default for CohortCalibration {
    fn default() -> Self {
        let mut target_correlations = BTreeMap::new();
        for (name, r) in [
            ("glucose", 0.57),
            ("bmi", 0.43),
            ("hba1c", 0.45),
            ("triglycerides", 0.40),
            ("rhr", 0.27),
            ("hdl", -0.30),
            ("steps", -0.25),
            ("hrv_rmssd", -0.14),
        ] {
            target_correlations.insert(name.to_string(), r);
        }
        CohortCalibration {
            target_correlations,
            // 459 / 406 / 300 participants per class
            class_fractions: (459.0 / 1165.0, 406.0 / 1165.0),
            cross_feature_latent: 0.1,
            wearable_days: 130,
        }
    }
}

impl CohortCalibration {
    pub fn validate(&self) -> Result<(), SynthError> {
        for name in self.target_correlations.keys() {
            if !COPULA_VARIABLES.contains(&name.as_str()) {
                return Err(SynthError::UnknownVariable { name: name.clone() });
            }
        }
        Ok(())
    }

    /// Lognormal HOMA-IR parameters hitting both class cut probabilities
    /// (P(h < 1.5) and P(h < 2.9)) exactly.
    pub fn homa_marginal(&self) -> Marginal {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let p1 = self.class_fractions.0;
        let p12 = self.class_fractions.0 + self.class_fractions.1;
        let z1 = normal.inverse_cdf(p1);
        let z2 = normal.inverse_cdf(p12);
        let sigma = (2.9f64.ln() - 1.5f64.ln()) / (z2 - z1);
        let mu = 1.5f64.ln() - sigma * z1;
        Marginal::LogNormal { mu, sigma }
    }
}

fn feature_marginal(name: &str) -> Marginal {
    // medians and dispersions from the cohort characteristics table
    match name {
        "glucose" => Marginal::TruncNormal { median: 90.0, sd: 13.2, lo: 40.0, hi: 300.0 },
        "bmi" => Marginal::TruncNormal { median: 28.0, sd: 6.7, lo: 13.0, hi: 64.0 },
        "hba1c" => Marginal::TruncNormal { median: 5.4, sd: 0.5, lo: 3.5, hi: 15.0 },
        // log-normal: SD/median 0.694 implies sigma 0.552
        "triglycerides" => Marginal::LogNormal { mu: 89.0f64.ln(), sigma: 0.552 },
        "rhr" => Marginal::TruncNormal { median: 66.0, sd: 8.2, lo: 35.0, hi: 110.0 },
        "hdl" => Marginal::TruncNormal { median: 56.0, sd: 15.4, lo: 15.0, hi: 130.0 },
        "steps" => Marginal::TruncNormal { median: 6909.0, sd: 3752.6, lo: 0.0, hi: 40000.0 },
        "hrv_rmssd" => Marginal::TruncNormal { median: 27.1, sd: 16.5, lo: 2.0, hi: 150.0 },
        _ => unreachable!("copula variable list is fixed"),
    }
}

/// One generated participant's person-level values; daily wearable rows
/// jitter around the wearable entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledParticipant {
    pub id: String,
    pub homa_ir: f64,
    pub values: BTreeMap<String, f64>,
}

/// The generated per-person table, returned alongside the CSV files so
/// calibration checks can run without re-ingesting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledCohort {
    pub participants: Vec<SampledParticipant>,
}

impl SampledCohort {
    pub fn column(&self, name: &str) -> Vec<f64> {
        self.participants
            .iter()
            .map(|p| p.values[name])
            .collect()
    }

    pub fn homa(&self) -> Vec<f64> {
        self.participants.iter().map(|p| p.homa_ir).collect()
    }
}

/// QC violations planted into the first rows of a generated cohort, for
/// exclusion-recovery tests.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantedViolations {
    pub not_fasting: usize,
    pub bmi_out_of_range: usize,
    pub homa_outlier: usize,
    pub insufficient_wearable_days: usize,
}

struct CsvWriter {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl CsvWriter {
    fn create(path: &Path, header: &str) -> Result<Self, SynthError> {
        let mut file = std::fs::File::create(path).map_err(|e| SynthError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        writeln!(file, "{header}").map_err(|e| SynthError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(CsvWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    fn row(&mut self, fields: &[String]) -> Result<(), SynthError> {
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| SynthError::Io {
            path: self.path.clone(),
            source: e,
        })
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

const GENDERS: [(&str, f64); 3] = [("female", 0.55), ("male", 0.43), ("other", 0.02)];
const ETHNICITIES: [(&str, f64); 6] = [
    ("white", 0.78),
    ("hispanic", 0.06),
    ("asian_indian", 0.05),
    ("asian_eastern", 0.03),
    ("african_american", 0.04),
    ("mixed", 0.04),
];

fn categorical<R: Rng>(rng: &mut R, table: &[(&str, f64)]) -> String {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (name, p) in table {
        acc += p;
        if draw < acc {
            return name.to_string();
        }
    }
    table.last().unwrap().0.to_string()
}

fn metabolic_analytes<R: Rng>(rng: &mut R) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let trunc = |median: f64, sd: f64, lo: f64, hi: f64, rng: &mut R| {
        Marginal::TruncNormal { median, sd, lo, hi }.transform(standard_normal(rng))
    };
    out.insert("albumin_globulin_ratio".into(), trunc(1.5, 0.3, 0.5, 3.5, rng));
    out.insert("creatinine".into(), trunc(0.9, 0.2, 0.3, 2.5, rng));
    out.insert("egfr".into(), trunc(95.0, 15.0, 30.0, 150.0, rng));
    out.insert("bun".into(), trunc(14.0, 4.0, 3.0, 40.0, rng));
    out.insert("sodium".into(), trunc(140.0, 2.5, 125.0, 155.0, rng));
    out.insert("potassium".into(), trunc(4.2, 0.35, 2.8, 6.0, rng));
    out.insert("chloride".into(), trunc(102.0, 2.5, 90.0, 115.0, rng));
    out.insert(
        "crp".into(),
        Marginal::LogNormal { mu: 0.0, sigma: 1.0 }.transform(standard_normal(rng)),
    );
    out
}

struct DailyJitter;

impl DailyJitter {
    const RHR: f64 = 1.5;
    const HRV: f64 = 3.0;
    const STEPS: f64 = 1800.0;
    const SLEEP: f64 = 45.0;
}

#[allow(clippy::too_many_arguments)]
fn write_cohort_files(
    dir: &Path,
    cohort: &SampledCohort,
    wearable_days_per_id: &BTreeMap<String, u32>,
    fasting_per_id: &BTreeMap<String, bool>,
    draw_date: chrono::NaiveDate,
    rng: &mut ChaCha8Rng,
) -> Result<CohortFiles, SynthError> {
    let files = CohortFiles::in_dir(dir);
    let mut participants = CsvWriter::create(
        &files.participants_path,
        "id,age,gender,ethnicity,height_m,weight_kg,bmi,hypertension,fasting,diabetes",
    )?;
    let mut wearables = CsvWriter::create(
        &files.wearables_path,
        "id,date,rhr,hrv_rmssd,steps,sleep_minutes",
    )?;
    let mut labs = CsvWriter::create(
        &files.labs_path,
        "id,draw_date,insulin,glucose,hba1c,hdl,ldl,triglycerides,total_cholesterol,\
         albumin_globulin_ratio,creatinine,egfr,bun,sodium,potassium,chloride,crp",
    )?;

    for p in &cohort.participants {
        let v = &p.values;
        let bmi = v["bmi"];
        let height = Marginal::TruncNormal { median: 1.69, sd: 0.09, lo: 1.4, hi: 2.05 }
            .transform(standard_normal(rng));
        let weight = bmi * height * height;
        let hypertension = rng.gen::<f64>() < (0.06 + 0.05 * p.homa_ir).clamp(0.0, 0.6);
        let diabetes = rng.gen::<f64>() < (0.01 + 0.02 * p.homa_ir).clamp(0.0, 0.4);
        let fasting = fasting_per_id[&p.id];
        participants.row(&[
            p.id.clone(),
            fmt(v["age"]),
            categorical(rng, &GENDERS),
            categorical(rng, &ETHNICITIES),
            fmt(height),
            fmt(weight),
            String::new(),
            (hypertension as u8).to_string(),
            (fasting as u8).to_string(),
            (diabetes as u8).to_string(),
        ])?;

        let n_days = wearable_days_per_id[&p.id];
        for back in 1..=n_days as i64 {
            let date = draw_date - chrono::Duration::days(back);
            let rhr = (v["rhr"] + DailyJitter::RHR * standard_normal(rng)).clamp(30.0, 200.0);
            let hrv = (v["hrv_rmssd"] + DailyJitter::HRV * standard_normal(rng)).max(1.0);
            let steps = (v["steps"] + DailyJitter::STEPS * standard_normal(rng)).max(0.0);
            let sleep =
                (v["sleep_minutes"] + DailyJitter::SLEEP * standard_normal(rng)).clamp(0.0, 1440.0);
            wearables.row(&[
                p.id.clone(),
                date.to_string(),
                fmt(rhr),
                fmt(hrv),
                fmt(steps),
                fmt(sleep),
            ])?;
        }

        let insulin = p.homa_ir * 405.0 / v["glucose"];
        let analytes = metabolic_analytes(rng);
        labs.row(&[
            p.id.clone(),
            draw_date.to_string(),
            fmt(insulin),
            fmt(v["glucose"]),
            fmt(v["hba1c"]),
            fmt(v["hdl"]),
            fmt(v["ldl"]),
            fmt(v["triglycerides"]),
            fmt(v["total_cholesterol"]),
            fmt(analytes["albumin_globulin_ratio"]),
            fmt(analytes["creatinine"]),
            fmt(analytes["egfr"]),
            fmt(analytes["bun"]),
            fmt(analytes["sodium"]),
            fmt(analytes["potassium"]),
            fmt(analytes["chloride"]),
            fmt(analytes["crp"]),
        ])?;
    }
    Ok(files)
}

/// Generate a calibrated cohort and write the three-file CSV layout.
/// Same seed, same files.
pub fn generate_synthetic_cohort(
    n: usize,
    calibration: &CohortCalibration,
    seed: u64,
    dir: &Path,
    violations: &PlantedViolations,
) -> Result<(CohortFiles, SampledCohort), SynthError> {
    if n < 100 {
        return Err(SynthError::TooSmall { n, min: 100 });
    }
    calibration.validate()?;
    let gh = gauss_hermite(48);
    let homa_marginal = calibration.homa_marginal();
    let d = COPULA_VARIABLES.len() + 1;

    // latent correlation matrix: index 0 is HOMA-IR
    let mut latent = DMatrix::<f64>::identity(d, d);
    let mut signs = vec![1.0; d];
    for (j, name) in COPULA_VARIABLES.iter().enumerate() {
        let target = calibration
            .target_correlations
            .get(*name)
            .copied()
            .unwrap_or(0.0);
        let rho = if target == 0.0 {
            0.0
        } else {
            invert_corr(&homa_marginal, &feature_marginal(name), target, &gh)
        };
        latent[(0, j + 1)] = rho;
        latent[(j + 1, 0)] = rho;
        signs[j + 1] = if target < 0.0 { -1.0 } else { 1.0 };
    }
    for i in 1..d {
        for j in (i + 1)..d {
            let rho = calibration.cross_feature_latent * signs[i] * signs[j];
            latent[(i, j)] = rho;
            latent[(j, i)] = rho;
        }
    }
    let repaired = nearest_psd(latent)?;
    let chol = nalgebra::Cholesky::new(repaired).ok_or(SynthError::NotPsd)?;
    let l = chol.l();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut participants = Vec::with_capacity(n);
    let mut fasting_per_id = BTreeMap::new();
    let mut days_per_id = BTreeMap::new();
    for i in 0..n {
        let iid = DVector::from_iterator(d, (0..d).map(|_| standard_normal(&mut rng)));
        let z = &l * iid;
        let mut homa = homa_marginal.transform(z[0]);
        let mut values = BTreeMap::new();
        for (j, name) in COPULA_VARIABLES.iter().enumerate() {
            values.insert(name.to_string(), feature_marginal(name).transform(z[j + 1]));
        }
        // independent extras
        values.insert(
            "age".into(),
            Marginal::TruncNormal { median: 45.0, sd: 12.5, lo: 21.0, hi: 80.0 }
                .transform(standard_normal(&mut rng)),
        );
        values.insert(
            "sleep_minutes".into(),
            Marginal::TruncNormal { median: 459.0, sd: 66.0, lo: 120.0, hi: 1000.0 }
                .transform(standard_normal(&mut rng)),
        );
        values.insert(
            "ldl".into(),
            Marginal::TruncNormal { median: 105.0, sd: 34.2, lo: 20.0, hi: 300.0 }
                .transform(standard_normal(&mut rng)),
        );
        // Friedewald relation keeps the lipid panel internally consistent
        let tc = values["hdl"] + values["ldl"] + values["triglycerides"] / 5.0;
        values.insert("total_cholesterol".into(), tc);

        let id = format!("s{i:05}");
        let mut fasting = true;
        let mut n_days = calibration.wearable_days;
        if i < violations.not_fasting {
            fasting = false;
        } else if i < violations.not_fasting + violations.bmi_out_of_range {
            values.insert("bmi".into(), 70.0);
        } else if i
            < violations.not_fasting + violations.bmi_out_of_range + violations.homa_outlier
        {
            homa = 16.0;
        } else if i
            < violations.not_fasting
                + violations.bmi_out_of_range
                + violations.homa_outlier
                + violations.insufficient_wearable_days
        {
            n_days = 5;
        }
        fasting_per_id.insert(id.clone(), fasting);
        days_per_id.insert(id.clone(), n_days);
        participants.push(SampledParticipant {
            id,
            homa_ir: homa,
            values,
        });
    }
    let cohort = SampledCohort { participants };
    let draw_date = chrono::NaiveDate::from_ymd_opt(2024, 6, 1).expect("valid date");
    let files = write_cohort_files(
        dir,
        &cohort,
        &days_per_id,
        &fasting_per_id,
        draw_date,
        &mut rng,
    )?;
    Ok((files, cohort))
}

/// Coefficients of the known generative formula. HOMA-IR increases with
/// BMI, glucose, RHR and triglycerides, decreases with steps, HRV and
/// HDL, plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    pub noise_sigma: f64,
    pub coef_glucose: f64,
    pub coef_bmi: f64,
    pub coef_rhr: f64,
    pub coef_steps: f64,
    pub coef_hrv: f64,
    pub coef_triglycerides: f64,
    pub coef_hdl: f64,
    pub intercept: f64,
    pub wearable_days: u32,
}

impl Default for FunctionalSpec {
    fn default() -> Self {
        FunctionalSpec {
            noise_sigma: 0.25,
            coef_glucose: 0.045,
            coef_bmi: 0.08,
            coef_rhr: 0.03,
            coef_steps: -0.00012,
            coef_hrv: -0.02,
            coef_triglycerides: 0.004,
            coef_hdl: -0.01,
            intercept: 1.3,
            wearable_days: 130,
        }
    }
}

impl FunctionalSpec {
    /// The exact noiseless target.
    pub fn formula(&self, v: &BTreeMap<String, f64>) -> f64 {
        self.intercept
            + self.coef_glucose * (v["glucose"] - 70.0)
            + self.coef_bmi * (v["bmi"] - 19.0)
            + self.coef_rhr * (v["rhr"] - 52.0)
            + self.coef_steps * v["steps"]
            + self.coef_hrv * (v["hrv_rmssd"] - 15.0)
            + self.coef_triglycerides * (v["triglycerides"] - 50.0)
            + self.coef_hdl * (v["hdl"] - 35.0)
    }
}

/// Noise floor summary emitted with a functional cohort: the best
/// achievable pooled R^2 is `1 - sigma^2 / var(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalTruth {
    pub noise_sigma: f64,
    pub var_y: f64,
    pub ideal_r2: f64,
}

/// Generate a cohort whose HOMA-IR is the known function plus noise.
pub fn generate_functional_cohort(
    n: usize,
    spec: &FunctionalSpec,
    seed: u64,
    dir: &Path,
) -> Result<(CohortFiles, SampledCohort, FunctionalTruth), SynthError> {
    if n < 50 {
        return Err(SynthError::TooSmall { n, min: 50 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut participants = Vec::with_capacity(n);
    let mut fasting_per_id = BTreeMap::new();
    let mut days_per_id = BTreeMap::new();
    for i in 0..n {
        let mut values = BTreeMap::new();
        values.insert("glucose".into(), rng.gen_range(75.0..115.0));
        values.insert("bmi".into(), rng.gen_range(19.0..38.0));
        values.insert("rhr".into(), rng.gen_range(52.0..80.0));
        values.insert("steps".into(), rng.gen_range(3000.0..13000.0));
        values.insert("hrv_rmssd".into(), rng.gen_range(15.0..45.0));
        values.insert("triglycerides".into(), rng.gen_range(50.0..200.0));
        values.insert("hdl".into(), rng.gen_range(35.0..80.0));
        values.insert("hba1c".into(), rng.gen_range(4.8..6.2));
        values.insert("age".into(), rng.gen_range(25.0..70.0));
        values.insert("sleep_minutes".into(), rng.gen_range(360.0..540.0));
        values.insert("ldl".into(), rng.gen_range(70.0..160.0));
        let tc = values["hdl"] + values["ldl"] + values["triglycerides"] / 5.0;
        values.insert("total_cholesterol".into(), tc);
        let homa = (spec.formula(&values) + spec.noise_sigma * standard_normal(&mut rng))
            .clamp(0.05, 14.5);
        let id = format!("f{i:05}");
        fasting_per_id.insert(id.clone(), true);
        days_per_id.insert(id.clone(), spec.wearable_days);
        participants.push(SampledParticipant {
            id,
            homa_ir: homa,
            values,
        });
    }
    let cohort = SampledCohort { participants };
    let y = cohort.homa();
    let var_y = {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64
    };
    let truth = FunctionalTruth {
        noise_sigma: spec.noise_sigma,
        var_y,
        ideal_r2: 1.0 - spec.noise_sigma.powi(2) / var_y,
    };
    let draw_date = chrono::NaiveDate::from_ymd_opt(2024, 6, 1).expect("valid date");
    let files = write_cohort_files(
        dir,
        &cohort,
        &days_per_id,
        &fasting_per_id,
        draw_date,
        &mut rng,
    )?;
    Ok((files, cohort, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pearson;

    #[test]
    fn gauss_hermite_integrates_moments() {
        let gh = gauss_hermite(48);
        // integral of 1 and z^2 under the standard normal
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let total: f64 = gh.1.iter().sum::<f64>() / sqrt_pi;
        assert!((total - 1.0).abs() < 1e-12);
        let second: f64 = gh
            .0
            .iter()
            .zip(&gh.1)
            .map(|(x, w)| w * 2.0 * x * x)
            .sum::<f64>()
            / sqrt_pi;
        assert!((second - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lognormal_inversion_matches_closed_form() {
        // for two lognormals the latent correlation has a closed form:
        // rho = ln(1 + r sqrt((e^{s1^2}-1)(e^{s2^2}-1))) / (s1 s2)
        let gh = gauss_hermite(48);
        let t1 = Marginal::LogNormal { mu: 0.6, sigma: 0.7 };
        let t2 = Marginal::LogNormal { mu: 4.5, sigma: 0.55 };
        let target = 0.4;
        let rho = invert_corr(&t1, &t2, target, &gh);
        let closed = (1.0
            + target * ((0.7f64.powi(2).exp() - 1.0) * (0.55f64.powi(2).exp() - 1.0)).sqrt())
        .ln()
            / (0.7 * 0.55);
        assert!((rho - closed).abs() < 1e-6, "{rho} vs {closed}");
    }

    #[test]
    fn homa_marginal_hits_class_fractions() {
        let cal = CohortCalibration::default();
        let m = cal.homa_marginal();
        let (mu, sigma) = match m {
            Marginal::LogNormal { mu, sigma } => (mu, sigma),
            _ => panic!("lognormal expected"),
        };
        let normal = Normal::new(0.0, 1.0).unwrap();
        let p_is = normal.cdf((1.5f64.ln() - mu) / sigma);
        let p_non_ir = normal.cdf((2.9f64.ln() - mu) / sigma);
        assert!((p_is - 459.0 / 1165.0).abs() < 1e-9);
        assert!((p_non_ir - (459.0 + 406.0) / 1165.0).abs() < 1e-9);
    }

    #[test]
    fn calibrated_correlations_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let mut cal = CohortCalibration::default();
        cal.wearable_days = 2; // person-level check; keep the files small
        let (_, cohort) = generate_synthetic_cohort(
            5000,
            &cal,
            7,
            dir.path(),
            &PlantedViolations::default(),
        )
        .unwrap();
        let homa = cohort.homa();
        for (name, &target) in &cal.target_correlations {
            let xs = cohort.column(name);
            let r = pearson(&xs, &homa).unwrap().r.unwrap();
            assert!(
                (r - target).abs() < 0.05,
                "{name}: got {r:.3}, want {target:.3}"
            );
            assert_eq!(r.signum(), target.signum(), "{name} sign");
        }
    }

    #[test]
    fn zeroed_targets_give_independence() {
        let dir = tempfile::tempdir().unwrap();
        let mut cal = CohortCalibration::default();
        for (_, v) in cal.target_correlations.iter_mut() {
            *v = 0.0;
        }
        cal.cross_feature_latent = 0.0;
        cal.wearable_days = 2;
        let (_, cohort) = generate_synthetic_cohort(
            5000,
            &cal,
            11,
            dir.path(),
            &PlantedViolations::default(),
        )
        .unwrap();
        let homa = cohort.homa();
        for name in COPULA_VARIABLES {
            let r = pearson(&cohort.column(name), &homa).unwrap().r.unwrap();
            assert!(r.abs() < 0.05, "{name}: {r}");
        }
    }

    #[test]
    fn same_seed_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cal = CohortCalibration::default();
        generate_synthetic_cohort(150, &cal, 3, d1.path(), &PlantedViolations::default())
            .unwrap();
        generate_synthetic_cohort(150, &cal, 3, d2.path(), &PlantedViolations::default())
            .unwrap();
        for name in ["participants.csv", "wearables.csv", "labs.csv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn insulin_roundtrips_through_formula() {
        let dir = tempfile::tempdir().unwrap();
        let cal = CohortCalibration::default();
        let (files, cohort) = generate_synthetic_cohort(
            120,
            &cal,
            5,
            dir.path(),
            &PlantedViolations::default(),
        )
        .unwrap();
        let records = crate::ingest::load_cohort(&files).unwrap();
        assert_eq!(records.len(), 120);
        for (rec, sampled) in records.iter().zip(&cohort.participants) {
            let h = rec.homa_ir().unwrap().value();
            assert!(
                (h - sampled.homa_ir).abs() < 1e-9 * (1.0 + sampled.homa_ir),
                "{}: {h} vs {}",
                rec.id,
                sampled.homa_ir
            );
        }
    }

    #[test]
    fn planted_violations_recovered_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cal = CohortCalibration::default();
        let planted = PlantedViolations {
            not_fasting: 3,
            bmi_out_of_range: 4,
            homa_outlier: 2,
            insufficient_wearable_days: 5,
        };
        let (files, _) =
            generate_synthetic_cohort(150, &cal, 9, dir.path(), &planted).unwrap();
        let records = crate::ingest::load_cohort(&files).unwrap();
        let (retained, report) =
            crate::ingest::apply_quality_control(&records, &crate::ingest::QcConfig::default());
        assert_eq!(report.not_fasting, 3);
        assert_eq!(report.bmi_out_of_range, 4);
        assert_eq!(report.homa_outlier, 2);
        assert_eq!(report.insufficient_wearable_days, 5);
        assert_eq!(retained.len(), 150 - 14);
    }

    #[test]
    fn functional_truth_reports_noise_floor() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FunctionalSpec::default();
        let (_, cohort, truth) =
            generate_functional_cohort(400, &spec, 1, dir.path()).unwrap();
        assert_eq!(cohort.participants.len(), 400);
        assert!(truth.ideal_r2 > 0.5 && truth.ideal_r2 < 1.0);
        // noiseless spec has ideal R^2 of 1
        let mut clean = spec.clone();
        clean.noise_sigma = 0.0;
        let (_, _, t2) = generate_functional_cohort(200, &clean, 2, dir.path()).unwrap();
        assert_eq!(t2.ideal_r2, 1.0);
    }
}
