//! Paired-sample t-test over random equal-size subsets, with the Student-t
//! distribution computed from the regularized incomplete beta function.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::derive_seed;
use crate::eval::{judge, EvalError, PredictionRecord};
use crate::types::QAPair;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "incomplete_beta needs a, b > 0");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).min(1.0)
}

/// P(T <= t).
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

pub fn student_t_pdf(t: f64, df: f64) -> f64 {
    (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln()
        - (df + 1.0) / 2.0 * (1.0 + t * t / df).ln())
    .exp()
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("prediction sets cover different examples: {only_a} only in A, {only_b} only in B (first: {first})")]
    IdMismatch { only_a: usize, only_b: usize, first: String },
    #[error("need 2 <= n_subsets <= n examples, got n_subsets={n_subsets}, n={n}")]
    InvalidSubsets { n_subsets: usize, n: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub t_statistic: f64,
    pub p_value: f64,
    pub df: usize,
    pub n_subsets: usize,
    pub mean_difference: f64,
    pub significant_05: bool,
    pub significant_01: bool,
}

/// Seeded shuffle of `0..n` cut into `k` contiguous parts; the first
/// `n % k` parts hold one extra element.
pub fn partition_indices(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["ttest-partition"]));
    idx.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// One-sample t-test on paired differences. Zero variance gives t = 0, p = 1.
pub fn t_test_differences(diffs: &[f64]) -> TTestReport {
    let k = diffs.len();
    assert!(k >= 2, "need at least two differences");
    let kf = k as f64;
    let mean = diffs.iter().sum::<f64>() / kf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (kf - 1.0);
    let (t, p) = if var == 0.0 {
        (0.0, 1.0)
    } else {
        let t = mean / (var / kf).sqrt();
        (t, student_t_two_sided_p(t, kf - 1.0))
    };
    TTestReport {
        t_statistic: t,
        p_value: p,
        df: k - 1,
        n_subsets: k,
        mean_difference: mean,
        significant_05: p < 0.05,
        significant_01: p < 0.01,
    }
}

/// Paired t-test on per-subset accuracies of two models over the same
/// examples. `correct_a` and `correct_b` map example id to EM correctness.
pub fn paired_t_test(
    correct_a: &BTreeMap<String, bool>,
    correct_b: &BTreeMap<String, bool>,
    n_subsets: usize,
    seed: u64,
) -> Result<TTestReport, StatsError> {
    let only_a: Vec<&String> = correct_a.keys().filter(|k| !correct_b.contains_key(*k)).collect();
    let only_b: Vec<&String> = correct_b.keys().filter(|k| !correct_a.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        let first = only_a.first().or(only_b.first()).map(|s| s.to_string()).unwrap_or_default();
        return Err(StatsError::IdMismatch { only_a: only_a.len(), only_b: only_b.len(), first });
    }
    let n = correct_a.len();
    if n_subsets < 2 || n_subsets > n {
        return Err(StatsError::InvalidSubsets { n_subsets, n });
    }
    let ids: Vec<&String> = correct_a.keys().collect();
    let diffs: Vec<f64> = partition_indices(n, n_subsets, seed)
        .iter()
        .map(|part| {
            let len = part.len() as f64;
            let a = part.iter().filter(|&&i| correct_a[ids[i]]).count() as f64;
            let b = part.iter().filter(|&&i| correct_b[ids[i]]).count() as f64;
            a / len - b / len
        })
        .collect();
    Ok(t_test_differences(&diffs))
}

/// EM correctness per example id.
pub fn correctness(
    predictions: &[PredictionRecord],
    pairs: &[QAPair],
) -> Result<BTreeMap<String, bool>, EvalError> {
    Ok(judge(predictions, pairs, None)?.into_iter().map(|j| (j.example_id, j.correct)).collect())
}

/// [`paired_t_test`] on two prediction sets judged against `pairs`.
pub fn paired_t_test_predictions(
    preds_a: &[PredictionRecord],
    preds_b: &[PredictionRecord],
    pairs: &[QAPair],
    n_subsets: usize,
    seed: u64,
) -> Result<TTestReport, StatsError> {
    let ids_a: std::collections::BTreeSet<&str> = preds_a.iter().map(|p| p.example_id.as_str()).collect();
    let ids_b: std::collections::BTreeSet<&str> = preds_b.iter().map(|p| p.example_id.as_str()).collect();
    if ids_a != ids_b {
        let only_a: Vec<&&str> = ids_a.difference(&ids_b).collect();
        let only_b: Vec<&&str> = ids_b.difference(&ids_a).collect();
        let first = only_a.first().or(only_b.first()).map(|s| s.to_string()).unwrap_or_default();
        return Err(StatsError::IdMismatch { only_a: only_a.len(), only_b: only_b.len(), first });
    }
    let scope: Vec<QAPair> = pairs.iter().filter(|p| ids_a.contains(p.id.as_str())).cloned().collect();
    paired_t_test(&correctness(preds_a, &scope)?, &correctness(preds_b, &scope)?, n_subsets, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn t_with_one_df_is_cauchy() {
        for t in [-3.0, -0.5, 0.0, 0.7, 2.0, 10.0] {
            let cauchy = 0.5 + f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0) - cauchy).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn t_with_two_df_closed_form() {
        for t in [-4.0f64, -1.0, 0.3, 2.5] {
            let exact = 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
            assert!((student_t_cdf(t, 2.0) - exact).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn beta_symmetry() {
        for &(a, b, x) in &[(2.0, 3.0, 0.4), (49.5, 0.5, 0.97), (0.5, 0.5, 0.1)] {
            let lhs = incomplete_beta(a, b, x);
            let rhs = 1.0 - incomplete_beta(b, a, 1.0 - x);
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }

    #[test]
    fn partition_sizes() {
        let parts = partition_indices(1030, 100, 7);
        assert!(parts.iter().all(|p| p.len() == 10 || p.len() == 11));
        let mut all: Vec<usize> = parts.concat();
        all.sort();
        assert_eq!(all, (0..1030).collect::<Vec<_>>());
    }

    #[test]
    fn identical_sets() {
        let m: BTreeMap<String, bool> = (0..300).map(|i| (format!("e{i}"), i % 3 == 0)).collect();
        let r = paired_t_test(&m, &m, 100, 1).unwrap();
        assert_eq!((r.t_statistic, r.p_value), (0.0, 1.0));
        assert!(!r.significant_05);
    }

    #[test]
    fn id_mismatch() {
        let a: BTreeMap<String, bool> = [("x".to_string(), true), ("y".to_string(), true)].into();
        let b: BTreeMap<String, bool> = [("x".to_string(), true), ("z".to_string(), true)].into();
        assert!(matches!(paired_t_test(&a, &b, 2, 0), Err(StatsError::IdMismatch { .. })));
    }

    #[test]
    fn hand_formula() {
        let d = [0.1, 0.2, 0.0, 0.3, 0.15];
        let mean: f64 = d.iter().sum::<f64>() / 5.0;
        let sd = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0).sqrt();
        let r = t_test_differences(&d);
        assert!((r.t_statistic - mean / (sd / 5f64.sqrt())).abs() < 1e-12);
        assert_eq!(r.df, 4);
    }
}
