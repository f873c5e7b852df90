//! Nuisance models: least squares outcome regressions, IRLS logistic
//! regression for sampling and selection propensities, and K-fold splits.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default probability clipping applied to every propensity prediction.
pub const DEFAULT_CLIP_EPS: f64 = 0.01;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;

/// Relative pivot size below which a design is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

pub trait Predictor {
    /// Number of features (excluding the intercept) the model expects.
    fn width(&self) -> usize;

    fn predict_row(&self, row: &[f64]) -> f64;

    fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.width() {
            return Err(Error::dimension(format!(
                "model expects {} features, got {}",
                self.width(),
                features.ncols()
            )));
        }
        let mut row = vec![0.0; features.ncols()];
        Ok((0..features.nrows())
            .map(|i| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = features[(i, j)];
                }
                self.predict_row(&row)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelFit {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Residual sum of squares divided by n.
    pub residual_mse: f64,
    /// Set when the design was rank deficient and a pseudo-inverse was used.
    pub rank_deficient: bool,
}

impl LinearModelFit {
    pub fn intercept_only(response: &[f64]) -> Self {
        let n = response.len().max(1) as f64;
        let mean = response.iter().sum::<f64>() / n;
        let rss: f64 = response.iter().map(|y| (y - mean).powi(2)).sum();
        Self { coefficients: vec![mean], feature_names: Vec::new(), residual_mse: rss / n, rank_deficient: false }
    }

    pub fn with_names(mut self, names: &[String]) -> Self {
        self.feature_names = names.to_vec();
        self
    }
}

impl Predictor for LinearModelFit {
    fn width(&self) -> usize {
        self.coefficients.len() - 1
    }

    #[inline]
    fn predict_row(&self, row: &[f64]) -> f64 {
        self.coefficients[0] + self.coefficients[1..].iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModelFit {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub clip_eps: f64,
}

impl LogisticModelFit {
    /// A model returning the same probability everywhere.
    pub fn constant(prob: f64, width: usize, clip_eps: f64) -> Self {
        let p = prob.clamp(1e-12, 1.0 - 1e-12);
        let mut coefficients = vec![0.0; width + 1];
        coefficients[0] = (p / (1.0 - p)).ln();
        Self { coefficients, converged: true, iterations: 0, clip_eps }
    }

    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.coefficients[0] + self.coefficients[1..].iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
    }
}

impl Predictor for LogisticModelFit {
    fn width(&self) -> usize {
        self.coefficients.len() - 1
    }

    #[inline]
    fn predict_row(&self, row: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(row)).clamp(self.clip_eps, 1.0 - self.clip_eps)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn with_intercept(features: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = features.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { features[(i, j - 1)] })
}

/// Minimum-norm least squares solution through the SVD.
fn pinv_solve(design: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(rhs, (smax * RANK_TOL).max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numerical(format!("pseudo-inverse solve failed: {e}")))
}

/// Ordinary least squares with an intercept, solved through a Householder
/// QR factorisation. Rank-deficient designs fall back to the SVD
/// pseudo-inverse and are flagged on the fit.
pub fn fit_linear(features: &DMatrix<f64>, response: &[f64]) -> Result<LinearModelFit> {
    let (n, p) = features.shape();
    if response.len() != n {
        return Err(Error::dimension(format!("{n} design rows but {} responses", response.len())));
    }
    if n < p + 1 {
        return Err(Error::precondition(format!("{n} rows cannot fit {} coefficients", p + 1)));
    }
    let design = with_intercept(features);
    let y = DVector::from_column_slice(response);

    let qr = design.clone().qr();
    let r = qr.r();
    let diag_max = (0..=p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let diag_min = (0..=p).map(|j| r[(j, j)].abs()).fold(f64::INFINITY, f64::min);
    let (beta, rank_deficient) = if diag_max > 0.0 && diag_min > RANK_TOL * diag_max {
        let mut qty = y.clone();
        qr.q_tr_mul(&mut qty);
        let rhs = qty.rows(0, p + 1).into_owned();
        let beta = r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        (beta, false)
    } else {
        log::debug!("rank-deficient design ({n}x{}), using pseudo-inverse", p + 1);
        (pinv_solve(&design, &y)?, true)
    };
    let fitted = &design * &beta;
    let rss: f64 = fitted.iter().zip(response).map(|(f, y)| (y - f).powi(2)).sum();
    Ok(LinearModelFit {
        coefficients: beta.iter().copied().collect(),
        feature_names: Vec::new(),
        residual_mse: rss / n as f64,
        rank_deficient,
    })
}

/// Bernoulli log-likelihood of `coefficients` (intercept first).
pub fn log_likelihood(features: &DMatrix<f64>, labels: &[u8], coefficients: &[f64]) -> f64 {
    (0..features.nrows())
        .map(|i| {
            let eta = coefficients[0] + (0..features.ncols()).map(|j| coefficients[j + 1] * features[(i, j)]).sum::<f64>();
            // log(1 + e^eta) computed stably
            let log1pexp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            if labels[i] == 1 {
                eta - log1pexp
            } else {
                -log1pexp
            }
        })
        .sum()
}

/// Logistic regression by iteratively reweighted least squares (Newton's
/// method with step halving).
pub fn fit_logistic(features: &DMatrix<f64>, labels: &[u8], max_iter: usize, tol: f64) -> Result<LogisticModelFit> {
    let (n, p) = features.shape();
    if labels.len() != n {
        return Err(Error::dimension(format!("{n} design rows but {} labels", labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::precondition("logistic regression needs both label classes"));
    }
    let design = with_intercept(features);
    let k = p + 1;
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();

    let mut beta = DVector::<f64>::zeros(k);
    let p0 = positives as f64 / n as f64;
    beta[0] = (p0 / (1.0 - p0)).ln();
    let mut ll = log_likelihood(features, labels, beta.as_slice());
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=max_iter {
        iterations = it;
        let eta = &design * &beta;
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let pi = sigmoid(eta[i]);
            let w = (pi * (1.0 - pi)).max(1e-12);
            let resid = y[i] - pi;
            for a in 0..k {
                let da = design[(i, a)];
                grad[a] += da * resid;
                for b in 0..=a {
                    hess[(a, b)] += w * da * design[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => pinv_solve(&hess, &grad)?,
        };

        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut cand_ll = log_likelihood(features, labels, candidate.as_slice());
        while cand_ll < ll - 1e-12 && scale > 1e-6 {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            cand_ll = log_likelihood(features, labels, candidate.as_slice());
        }
        let max_change = (step * scale).amax();
        let ll_change = (cand_ll - ll).abs();
        beta = candidate;
        ll = cand_ll;

        let separated = {
            let eta = &design * &beta;
            (0..n).all(|i| (y[i] - sigmoid(eta[i])).abs() < 1e-6)
        };
        if separated {
            continue;
        }
        if max_change < tol || ll_change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("logistic regression did not converge after {iterations} iterations");
    }
    Ok(LogisticModelFit { coefficients: beta.iter().copied().collect(), converged, iterations, clip_eps: DEFAULT_CLIP_EPS })
}

/// Random balanced partition of a set of record indices into `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Record index to fold id in `1..=k`.
    pub fold_of: BTreeMap<usize, usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// Members of fold `fold` in increasing index order.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        self.fold_of.iter().filter(|(_, &f)| f == fold).map(|(&i, _)| i).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.fold_of.values() {
            s[f - 1] += 1;
        }
        s
    }
}

pub fn kfold_split(indices: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::precondition("at least two folds are required"));
    }
    if k > indices.len() {
        return Err(Error::precondition(format!("{k} folds requested for {} indices", indices.len())));
    }
    let mut shuffled = indices.to_vec();
    let mut rng = seed::rng(seed);
    shuffled.shuffle(&mut rng);
    let fold_of = shuffled.iter().enumerate().map(|(pos, &i)| (i, pos % k + 1)).collect::<BTreeMap<_, _>>();
    if fold_of.len() != indices.len() {
        return Err(Error::precondition("fold indices must be distinct"));
    }
    Ok(FoldAssignment { fold_of, k, seed })
}
