//! Ordinary least squares for
//! `accuracy = b0 + b_kn * N_kn/|D| + b_unk * N_unk/|D|`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("regressors are rank deficient; coefficients are not identifiable")]
    RankDeficient,
    #[error("point {0} has |D| = 0")]
    ZeroDatasetSize(usize),
}

/// One (accuracy, fitted counts) observation, typically one epoch of one
/// variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub accuracy: f64,
    pub n_kn: f64,
    pub n_unk: f64,
    pub d_size: f64,
}

impl FitPoint {
    pub fn regressors(&self) -> [f64; 3] {
        [1.0, self.n_kn / self.d_size, self.n_unk / self.d_size]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub beta0: f64,
    pub beta_kn: f64,
    pub beta_unk: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub domain_note: String,
}

impl LinearFit {
    pub fn predict(&self, n_kn: f64, n_unk: f64, d_size: f64) -> f64 {
        self.beta0 + self.beta_kn * n_kn / d_size + self.beta_unk * n_unk / d_size
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.beta0, self.beta_kn, self.beta_unk]
    }
}

/// Solves `A x = b` for a symmetric positive definite 3x3 `A`.
fn cholesky_solve(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = (0..3).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= scale * 1e-12 {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..3 {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        x[i] = (y[i] - (i + 1..3).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Least-squares fit via the normal equations and a Cholesky factorization.
/// R² is 1 when every accuracy is identical.
pub fn fit_linear_model(points: &[FitPoint]) -> Result<LinearFit, RegressionError> {
    if points.len() < 3 {
        return Err(RegressionError::TooFewPoints(points.len()));
    }
    if let Some(i) = points.iter().position(|p| p.d_size == 0.0) {
        return Err(RegressionError::ZeroDatasetSize(i));
    }
    let mut xtx = [[0.0; 3]; 3];
    let mut xty = [0.0; 3];
    for p in points {
        let x = p.regressors();
        for i in 0..3 {
            xty[i] += x[i] * p.accuracy;
            for j in 0..3 {
                xtx[i][j] += x[i] * x[j];
            }
        }
    }
    let beta = cholesky_solve(xtx, xty).ok_or(RegressionError::RankDeficient)?;
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.accuracy).sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for p in points {
        let x = p.regressors();
        let fitted: f64 = (0..3).map(|i| beta[i] * x[i]).sum();
        ss_res += (p.accuracy - fitted).powi(2);
        ss_tot += (p.accuracy - mean).powi(2);
    }
    let r_squared = if ss_tot == 0.0 { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(LinearFit {
        beta0: beta[0],
        beta_kn: beta[1],
        beta_unk: beta[2],
        r_squared,
        n_points: points.len(),
        domain_note: "valid only for 0 <= N_kn <= |D| and 0 <= N_unk <= |D|".into(),
    })
}

/// `X^T r` for the fit's own points.
pub fn residual_projection(fit: &LinearFit, points: &[FitPoint]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for p in points {
        let x = p.regressors();
        let r = p.accuracy - fit.predict(p.n_kn, p.n_unk, p.d_size);
        for i in 0..3 {
            out[i] += x[i] * r;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(f: impl Fn(f64, f64) -> f64) -> Vec<FitPoint> {
        let mut pts = Vec::new();
        for i in 0..=10 {
            for j in 0..=10 {
                let (kn, unk) = (i as f64 * 10.0, j as f64 * 7.0);
                pts.push(FitPoint { accuracy: f(kn / 100.0, unk / 100.0), n_kn: kn, n_unk: unk, d_size: 100.0 });
            }
        }
        pts
    }

    #[test]
    fn planted_noiseless() {
        let pts = grid(|a, b| 0.40 + 0.30 * a - 0.30 * b);
        let f = fit_linear_model(&pts).unwrap();
        assert!((f.beta0 - 0.40).abs() < 1e-9);
        assert!((f.beta_kn - 0.30).abs() < 1e-9);
        assert!((f.beta_unk + 0.30).abs() < 1e-9);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_response() {
        let f = fit_linear_model(&grid(|_, _| 0.5)).unwrap();
        assert!((f.beta0 - 0.5).abs() < 1e-12);
        assert!(f.beta_kn.abs() < 1e-12 && f.beta_unk.abs() < 1e-12);
        assert_eq!(f.r_squared, 1.0);
    }

    #[test]
    fn identical_regressors_rank_deficient() {
        let p = FitPoint { accuracy: 0.3, n_kn: 5.0, n_unk: 2.0, d_size: 10.0 };
        let pts = vec![p, FitPoint { accuracy: 0.4, ..p }, FitPoint { accuracy: 0.5, ..p }];
        assert_eq!(fit_linear_model(&pts), Err(RegressionError::RankDeficient));
    }

    #[test]
    fn collinear_regressors_rank_deficient() {
        let pts: Vec<FitPoint> = (0..5)
            .map(|i| FitPoint { accuracy: i as f64, n_kn: i as f64, n_unk: i as f64, d_size: 10.0 })
            .collect();
        assert_eq!(fit_linear_model(&pts), Err(RegressionError::RankDeficient));
    }

    #[test]
    fn too_few() {
        assert_eq!(fit_linear_model(&[]), Err(RegressionError::TooFewPoints(0)));
    }
}
