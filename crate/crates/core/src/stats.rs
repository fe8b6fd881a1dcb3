//! Statistical tests: Wilcoxon rank-sum, McNemar, and Benjamini-Hochberg
//! multiple-testing correction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("p-values must lie in [0, 1]")]
    InvalidPValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

/// Outcome of a two-sided rank-sum test. `degenerate` marks inputs where
/// the statistic carries no information (e.g. every value tied).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Rank sum of the first sample (mid-ranks for ties).
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub degenerate: bool,
}

/// Mid-ranks of the pooled sample, and tie-group sizes.
fn pooled_ranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut pooled: Vec<(f64, usize)> = a
        .iter()
        .chain(b.iter())
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let n = pooled.len();
    let mut ranks = vec![0.0; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
        for item in &pooled[i..j] {
            ranks[item.1] = mid;
        }
        tie_sizes.push(j - i);
        i = j;
    }
    (ranks, tie_sizes)
}

/// Two-sided Wilcoxon rank-sum test. Uses exact enumeration of rank-sum
/// assignments when both samples have at most `exact_max_each` (10)
/// observations and at most 20 combined; the tie-corrected normal
/// approximation with continuity correction otherwise.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    if a.len() <= 10 && b.len() <= 10 && a.len() + b.len() <= 20 {
        wilcoxon_rank_sum_exact(a, b)
    } else {
        wilcoxon_rank_sum_normal(a, b)
    }
}

/// Normal-approximation route with tie correction and continuity
/// correction toward the mean.
pub fn wilcoxon_rank_sum_normal(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let (ranks, ties) = pooled_ranks(a, b);
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let n = n1 + n2;
    let w: f64 = ranks[..a.len()].iter().sum();
    let mean = n1 * (n + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: 1.0,
            method: TestMethod::NormalApprox,
            degenerate: true,
        });
    }
    let diff = w - mean;
    let cc = 0.5 * diff.signum();
    let z = (diff - cc) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = (2.0 * normal.sf(z.abs())).min(1.0);
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p,
        method: TestMethod::NormalApprox,
        degenerate: false,
    })
}

/// Exact permutation distribution of the rank sum (with mid-ranks), via
/// dynamic programming over doubled ranks. Two-sided p doubles the
/// smaller tail, capped at 1.
pub fn wilcoxon_rank_sum_exact(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let (ranks, ties) = pooled_ranks(a, b);
    let n1 = a.len();
    let w: f64 = ranks[..n1].iter().sum();
    if ties.len() == 1 {
        // every observation tied: rank sum is constant
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: 1.0,
            method: TestMethod::Exact,
            degenerate: true,
        });
    }
    // doubled mid-ranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // count[k][s]: subsets of size k with doubled rank sum s
    let mut count = vec![vec![0f64; total + 1]; n1 + 1];
    count[0][0] = 1.0;
    for &r in &doubled {
        for k in (0..n1).rev() {
            for s in 0..=total.saturating_sub(r) {
                if count[k][s] > 0.0 {
                    count[k + 1][s + r] += count[k][s];
                }
            }
        }
    }
    let w2 = (2.0 * w).round() as usize;
    let dist = &count[n1];
    let all: f64 = dist.iter().sum();
    let lower: f64 = dist[..=w2].iter().sum();
    let upper: f64 = dist[w2..].iter().sum();
    let p = (2.0 * (lower.min(upper)) / all).min(1.0);
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p,
        method: TestMethod::Exact,
        degenerate: false,
    })
}

/// McNemar's test on discordant pair counts, with continuity correction.
/// `b` and `c` are the two discordant cells. Zero discordant pairs is
/// degenerate (p = 1, flagged).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub statistic: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

pub fn mcnemar(b: usize, c: usize) -> McNemarResult {
    let nd = b + c;
    if nd == 0 {
        return McNemarResult {
            statistic: 0.0,
            p_value: 1.0,
            degenerate: true,
        };
    }
    let diff = (b as f64 - c as f64).abs();
    let chi2 = (diff - 1.0).max(0.0).powi(2) / nd as f64;
    let dist = ChiSquared::new(1.0).expect("chi-squared df=1");
    McNemarResult {
        statistic: chi2,
        p_value: dist.sf(chi2).min(1.0),
        degenerate: false,
    }
}

/// Benjamini-Hochberg adjusted p-values, returned in the input order.
/// Output is monotone in the sorted order and capped at 1.
pub fn benjamini_hochberg(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(StatsError::InvalidPValue);
    }
    let m = p_values.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).unwrap());
    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for (rank, &idx) in order.iter().enumerate().rev() {
        let raw = p_values[idx] * m as f64 / (rank + 1) as f64;
        running_min = running_min.min(raw).min(1.0);
        adjusted[idx] = running_min;
    }
    Ok(adjusted)
}

/// Two-sided p-value for a Student's t statistic.
pub fn students_t_two_sided_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    (2.0 * dist.sf(t.abs())).min(1.0)
}
