//! No-borrowing and full-borrowing estimators of the region-specific average
//! treatment effect, the inverse-variance-weighted (IVW) prediction blend,
//! and influence-function standard errors.
//!
//! Every arm estimate is an augmented inverse-probability-weighted mean of
//! the form
//!
//! ```text
//! theta_a = (1/n_R) * sum_i [ R_i * yhat_i + w_i * (Y_i - yhat_i) ]
//! ```
//!
//! where the estimators differ only in the outcome prediction `yhat` and the
//! augmentation weight `w`. The per-record contributions stored on an
//! [`ArmEstimate`] are the bracketed terms scaled by `n / n_R`, so their mean
//! over all records is `theta_a` and the variance of `sqrt(n) * tau_hat` is
//! estimated by `(1/n) * sum_i (c1_i - c0_i - R_i * tau_hat * n / n_R)^2`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{StudyDataset, TrialRecord};
use crate::error::{Error, Result};
use crate::frame;
use crate::models::{self, LinearModelFit, LogisticModelFit, Predictor};

/// Treatment-assignment probabilities fixed by the trial design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignPropensity {
    /// Same P(A = 1) for every patient.
    Constant { p: f64 },
    /// Region-stratified randomization: one probability for the target
    /// region and one for all auxiliary regions.
    ByRegion { target: f64, auxiliary: f64 },
    /// Per-record P(A = 1), indexed like the dataset.
    Table { probs: Vec<f64> },
}

impl Default for DesignPropensity {
    fn default() -> Self {
        DesignPropensity::Constant { p: 0.5 }
    }
}

impl DesignPropensity {
    /// P(A = 1) for record `i`.
    pub fn treated_prob(&self, i: usize, record: &TrialRecord) -> f64 {
        match self {
            DesignPropensity::Constant { p } => *p,
            DesignPropensity::ByRegion { target, auxiliary } => {
                if record.is_target() {
                    *target
                } else {
                    *auxiliary
                }
            }
            DesignPropensity::Table { probs } => probs[i],
        }
    }

    /// P(A = arm) for record `i`.
    #[inline]
    pub fn arm_prob(&self, i: usize, record: &TrialRecord, arm: u8) -> f64 {
        let p1 = self.treated_prob(i, record);
        if arm == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    pub fn check(&self, dataset: &StudyDataset) -> Result<()> {
        if let DesignPropensity::Table { probs } = self {
            if probs.len() != dataset.n() {
                return Err(Error::dimension(format!(
                    "design table has {} entries, dataset has {} records",
                    probs.len(),
                    dataset.n()
                )));
            }
        }
        for (i, r) in dataset.records().iter().enumerate() {
            let p = self.treated_prob(i, r);
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Validation(format!("design probability {p} for record {i} is not in (0, 1)")));
            }
        }
        Ok(())
    }

    /// The design restricted to (or re-ordered by) the given record indices.
    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            DesignPropensity::Table { probs } => DesignPropensity::Table { probs: indices.iter().map(|&i| probs[i]).collect() },
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub alpha: f64,
    pub clip_eps: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self { alpha: 0.05, clip_eps: models::DEFAULT_CLIP_EPS, max_iter: models::DEFAULT_MAX_ITER, tol: models::DEFAULT_TOL }
    }
}

/// Estimated mean potential outcome for one arm in the target region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmEstimate {
    pub arm: u8,
    pub theta_hat: f64,
    /// Per-record contributions on the `sqrt(n)` scale; their mean over all
    /// records equals `theta_hat`.
    pub contributions: Vec<f64>,
}

impl ArmEstimate {
    pub fn contribution_mean(&self) -> f64 {
        self.contributions.iter().sum::<f64>() / self.contributions.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub method: String,
    pub tau_hat: f64,
    pub theta1: ArmEstimate,
    pub theta0: ArmEstimate,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    /// Borrowed auxiliary records per arm, `[arm 0, arm 1]`.
    pub borrowed_indices: Option<[Vec<usize>; 2]>,
    /// Selection thresholds per arm, `[arm 0, arm 1]`.
    pub gamma: Option<[f64; 2]>,
    /// Warnings raised while fitting (fallbacks, non-convergence, ...).
    pub flags: Vec<String>,
}

impl TauEstimate {
    pub fn from_arms(method: &str, theta1: ArmEstimate, theta0: ArmEstimate, se: f64, alpha: f64) -> Self {
        let tau_hat = theta1.theta_hat - theta0.theta_hat;
        let z = normal_quantile(1.0 - alpha / 2.0);
        Self {
            method: method.to_string(),
            tau_hat,
            theta1,
            theta0,
            se,
            ci_lower: tau_hat - z * se,
            ci_upper: tau_hat + z * se,
            alpha,
            borrowed_indices: None,
            gamma: None,
            flags: Vec::new(),
        }
    }

    /// Two-sided p-value of the Wald test of `tau = 0`.
    pub fn p_value(&self) -> f64 {
        if self.se > 0.0 {
            2.0 * (1.0 - normal_cdf((self.tau_hat / self.se).abs()))
        } else if self.tau_hat == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn covers(&self, tau: f64) -> bool {
        self.ci_lower <= tau && tau <= self.ci_upper
    }

    pub fn borrowed_count(&self) -> Option<[usize; 2]> {
        self.borrowed_indices.as_ref().map(|b| [b[0].len(), b[1].len()])
    }

    pub fn to_record(&self, include_indices: bool) -> EstimateRecord {
        EstimateRecord {
            method: self.method.clone(),
            tau_hat: self.tau_hat,
            se: self.se,
            ci: [self.ci_lower, self.ci_upper],
            alpha: self.alpha,
            p_value: self.p_value(),
            theta1: self.theta1.theta_hat,
            theta0: self.theta0.theta_hat,
            gamma: self.gamma,
            borrowed_count: self.borrowed_count(),
            borrowed_indices: if include_indices { self.borrowed_indices.clone() } else { None },
            flags: self.flags.clone(),
        }
    }
}

/// Flat, serializable summary of a [`TauEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub method: String,
    pub tau_hat: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub alpha: f64,
    pub p_value: f64,
    pub theta1: f64,
    pub theta0: f64,
    pub gamma: Option<[f64; 2]>,
    pub borrowed_count: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub borrowed_indices: Option<[Vec<usize>; 2]>,
    pub flags: Vec<String>,
}

/// Outcome predictions blending the target-only and pooled models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvwPrediction {
    /// Blended prediction for target rows, pooled-model prediction for
    /// auxiliary rows. Length n.
    pub y_hat: Vec<f64>,
    pub w_nb: f64,
    pub w_fb: f64,
    pub v_nb: f64,
    pub v_fb: f64,
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Wald interval `tau_hat -/+ z_{1 - alpha/2} * sqrt(v_hat / n)`.
pub fn confidence_interval(tau_hat: f64, v_hat: f64, n: usize, alpha: f64) -> (f64, f64) {
    let half = normal_quantile(1.0 - alpha / 2.0) * (v_hat.max(0.0) / n as f64).sqrt();
    (tau_hat - half, tau_hat + half)
}

// ---------------------------------------------------------------------------
// shared building blocks
// ---------------------------------------------------------------------------

/// Fits an outcome regression on `rows`, using U as well when `with_u`.
/// Too few rows for the full model falls back to an intercept-only fit.
pub(crate) fn fit_outcome(ds: &StudyDataset, rows: &[usize], with_u: bool, flags: &mut Vec<String>) -> Result<LinearModelFit> {
    if rows.is_empty() {
        return Err(Error::precondition("outcome model has no rows to fit"));
    }
    let features = if with_u { frame::xu_rows(ds, rows)? } else { frame::x_rows(ds, rows) };
    let y = frame::outcomes(ds, rows);
    let p = features.ncols();
    if rows.len() < p + 1 {
        flags.push(format!("outcome model on {} rows fell back to intercept only", rows.len()));
        let mut fit = LinearModelFit::intercept_only(&y);
        fit.coefficients.resize(p + 1, 0.0);
        return Ok(fit);
    }
    let fit = models::fit_linear(&features, &y)?;
    if fit.rank_deficient {
        flags.push("rank-deficient outcome design solved by pseudo-inverse".into());
    }
    Ok(fit)
}

/// Logistic model for `label(i)` over the `base` rows on shared covariates.
/// A label that is constant over `base` yields a constant clipped fit.
pub(crate) fn fit_membership(
    ds: &StudyDataset,
    base: &[usize],
    label: impl Fn(usize) -> bool,
    opts: &EstimatorOptions,
    what: &str,
    flags: &mut Vec<String>,
) -> Result<LogisticModelFit> {
    let labels: Vec<u8> = base.iter().map(|&i| label(i) as u8).collect();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let width = ds.schema().shared_names.len();
    if pos == 0 {
        flags.push(format!("{what}: no positive rows, probability clipped low"));
        return Ok(LogisticModelFit::constant(opts.clip_eps, width, opts.clip_eps));
    }
    if pos == labels.len() {
        flags.push(format!("{what}: no negative rows, probability clipped high"));
        return Ok(LogisticModelFit::constant(1.0 - opts.clip_eps, width, opts.clip_eps));
    }
    let features = frame::x_rows(ds, base);
    let mut fit = models::fit_logistic(&features, &labels, opts.max_iter, opts.tol)?;
    fit.clip_eps = opts.clip_eps;
    if !fit.converged {
        flags.push(format!("{what}: logistic fit did not converge"));
    }
    Ok(fit)
}

/// Builds an arm estimate from per-record predictions and augmentation
/// weights (weight 0 excludes a record from the augmentation term).
pub(crate) fn arm_from_parts(ds: &StudyDataset, arm: u8, y_hat: &[f64], weight: &[f64]) -> ArmEstimate {
    let n = ds.n() as f64;
    let n_target = ds.n_target() as f64;
    let raw: Vec<f64> = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let base = if r.is_target() { y_hat[i] } else { 0.0 };
            let aug = if weight[i] != 0.0 { weight[i] * (r.outcome - y_hat[i]) } else { 0.0 };
            base + aug
        })
        .collect();
    let theta_hat = raw.iter().sum::<f64>() / n_target;
    let contributions = raw.iter().map(|v| v * n / n_target).collect();
    ArmEstimate { arm, theta_hat, contributions }
}

/// Influence-function variance of `sqrt(n) * tau_hat`.
pub(crate) fn influence_variance(ds: &StudyDataset, theta1: &ArmEstimate, theta0: &ArmEstimate) -> f64 {
    let n = ds.n() as f64;
    let scale = n / ds.n_target() as f64;
    let tau = theta1.theta_hat - theta0.theta_hat;
    ds.records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let centre = if r.is_target() { tau * scale } else { 0.0 };
            (theta1.contributions[i] - theta0.contributions[i] - centre).powi(2)
        })
        .sum::<f64>()
        / n
}

/// Per-record influence values `c1 - c0 - R * tau * n / n_R`.
pub fn influence_vector(ds: &StudyDataset, est: &TauEstimate) -> Vec<f64> {
    let scale = ds.n() as f64 / ds.n_target() as f64;
    ds.records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let centre = if r.is_target() { est.tau_hat * scale } else { 0.0 };
            est.theta1.contributions[i] - est.theta0.contributions[i] - centre
        })
        .collect()
}

pub(crate) fn combine_arms(
    ds: &StudyDataset,
    method: &str,
    theta1: ArmEstimate,
    theta0: ArmEstimate,
    opts: &EstimatorOptions,
    mut flags: Vec<String>,
) -> TauEstimate {
    let counts = ds.target_arm_counts();
    let se = if counts.iter().any(|&c| c < 2) {
        flags.push("fewer than two target records in an arm; standard error set to 0".into());
        0.0
    } else {
        (influence_variance(ds, &theta1, &theta0) / ds.n() as f64).sqrt()
    };
    let mut est = TauEstimate::from_arms(method, theta1, theta0, se, opts.alpha);
    est.flags = flags;
    est
}

pub(crate) fn check_target_arms(ds: &StudyDataset) -> Result<()> {
    let [c0, c1] = ds.target_arm_counts();
    if c0 == 0 || c1 == 0 {
        return Err(Error::precondition("the target region needs records in both arms"));
    }
    Ok(())
}

pub(crate) fn target_arm_rows(ds: &StudyDataset, arm: u8) -> Vec<usize> {
    ds.indices_where(|r| r.is_target() && r.treatment == arm)
}

pub(crate) fn aux_arm_rows(ds: &StudyDataset, arm: u8) -> Vec<usize> {
    ds.indices_where(|r| !r.is_target() && r.treatment == arm)
}

/// Predictions of a shared-covariate model for every record.
pub(crate) fn predict_x_all(ds: &StudyDataset, fit: &impl Predictor) -> Vec<f64> {
    ds.records().iter().map(|r| fit.predict_row(&r.x)).collect()
}

/// Predictions of an (X, U) model for target records; 0 elsewhere.
pub(crate) fn predict_xu_target(ds: &StudyDataset, fit: &LinearModelFit) -> Vec<f64> {
    let mut buf = Vec::new();
    (0..ds.n())
        .map(|i| {
            if ds.record(i).is_target() {
                frame::xu_of(ds, i, &mut buf);
                fit.predict_row(&buf)
            } else {
                0.0
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// no borrowing
// ---------------------------------------------------------------------------

pub(crate) fn nb_arm(
    ds: &StudyDataset,
    design: &DesignPropensity,
    arm: u8,
    with_u: bool,
    flags: &mut Vec<String>,
) -> Result<ArmEstimate> {
    let rows = target_arm_rows(ds, arm);
    let fit = fit_outcome(ds, &rows, with_u, flags)?;
    let y_hat = if with_u { predict_xu_target(ds, &fit) } else { predict_x_all(ds, &fit) };
    let weight: Vec<f64> = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| if r.is_target() && r.treatment == arm { 1.0 / design.arm_prob(i, r, arm) } else { 0.0 })
        .collect();
    Ok(arm_from_parts(ds, arm, &y_hat, &weight))
}

fn estimate_nb(ds: &StudyDataset, design: &DesignPropensity, with_u: bool, opts: &EstimatorOptions) -> Result<TauEstimate> {
    check_target_arms(ds)?;
    design.check(ds)?;
    let mut flags = Vec::new();
    let t1 = nb_arm(ds, design, 1, with_u, &mut flags)?;
    let t0 = nb_arm(ds, design, 0, with_u, &mut flags)?;
    Ok(combine_arms(ds, if with_u { "NB-AllCov" } else { "NB-Xonly" }, t1, t0, opts, flags))
}

/// Target-only AIPW estimator adjusting for shared covariates X.
pub fn estimate_nb_xonly(ds: &StudyDataset, design: &DesignPropensity, opts: &EstimatorOptions) -> Result<TauEstimate> {
    estimate_nb(ds, design, false, opts)
}

/// Target-only AIPW estimator adjusting for X and the target-only U.
pub fn estimate_nb_allcov(ds: &StudyDataset, design: &DesignPropensity, opts: &EstimatorOptions) -> Result<TauEstimate> {
    estimate_nb(ds, design, true, opts)
}

// ---------------------------------------------------------------------------
// full borrowing
// ---------------------------------------------------------------------------

/// Sampling score P(R = 1 | X) fitted on all records, evaluated per record.
pub(crate) fn sampling_scores(ds: &StudyDataset, opts: &EstimatorOptions, flags: &mut Vec<String>) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..ds.n()).collect();
    let fit = fit_membership(ds, &all, |i| ds.record(i).is_target(), opts, "sampling model", flags)?;
    Ok(predict_x_all(ds, &fit))
}

/// Fitted sampling model P(R = 1 | X) on all records.
pub fn fit_sampling_model(ds: &StudyDataset, opts: &EstimatorOptions) -> Result<LogisticModelFit> {
    let all: Vec<usize> = (0..ds.n()).collect();
    fit_membership(ds, &all, |i| ds.record(i).is_target(), opts, "sampling model", &mut Vec::new())
}

/// Weights `pi(X_i) * I(A_i = a) / e_a(X_i)` for every record.
pub(crate) fn borrowing_weights(ds: &StudyDataset, design: &DesignPropensity, arm: u8, pi: &[f64]) -> Vec<f64> {
    ds.records()
        .iter()
        .enumerate()
        .map(|(i, r)| if r.treatment == arm { pi[i] / design.arm_prob(i, r, arm) } else { 0.0 })
        .collect()
}

/// Doubly robust estimator borrowing all auxiliary records, adjusting for X.
pub fn estimate_fb_xonly(ds: &StudyDataset, design: &DesignPropensity, opts: &EstimatorOptions) -> Result<TauEstimate> {
    check_target_arms(ds)?;
    design.check(ds)?;
    let mut flags = Vec::new();
    if ds.n_aux() == 0 {
        flags.push("no auxiliary records; full borrowing reduces to the target-only structure".into());
    }
    let pi = sampling_scores(ds, opts, &mut flags)?;
    fb_xonly_from_scores(ds, design, &pi, opts, flags)
}

/// FB-Xonly with externally supplied sampling scores P(R = 1 | X), one per
/// record, in place of the fitted logistic model.
pub fn estimate_fb_xonly_with_scores(
    ds: &StudyDataset,
    design: &DesignPropensity,
    pi: &[f64],
    opts: &EstimatorOptions,
) -> Result<TauEstimate> {
    check_target_arms(ds)?;
    design.check(ds)?;
    if pi.len() != ds.n() {
        return Err(Error::dimension(format!("{} sampling scores for {} records", pi.len(), ds.n())));
    }
    fb_xonly_from_scores(ds, design, pi, opts, Vec::new())
}

fn fb_xonly_from_scores(
    ds: &StudyDataset,
    design: &DesignPropensity,
    pi: &[f64],
    opts: &EstimatorOptions,
    mut flags: Vec<String>,
) -> Result<TauEstimate> {
    let mut arm = |a: u8| -> Result<ArmEstimate> {
        let rows = ds.indices_where(|r| r.treatment == a);
        let fit = fit_outcome(ds, &rows, false, &mut flags)?;
        let y_hat = predict_x_all(ds, &fit);
        Ok(arm_from_parts(ds, a, &y_hat, &borrowing_weights(ds, design, a, pi)))
    };
    let t1 = arm(1)?;
    let t0 = arm(0)?;
    Ok(combine_arms(ds, "FB-Xonly", t1, t0, opts, flags))
}

/// IVW predictions where the pooled model and its error variance use the
/// target arm rows plus `aux_pool`.
pub(crate) fn ivw_predictions_pool(
    ds: &StudyDataset,
    arm: u8,
    nb_fit: &LinearModelFit,
    fb_fit: &LinearModelFit,
    aux_pool: &[usize],
) -> IvwPrediction {
    let mut buf = Vec::new();
    let mut nb_pred = vec![0.0; ds.n()];
    let mut sse_nb = 0.0;
    let mut cnt_nb = 0usize;
    let mut sse_fb = 0.0;
    let mut cnt_fb = 0usize;
    let fb_pred = predict_x_all(ds, fb_fit);
    for (i, r) in ds.records().iter().enumerate() {
        if r.is_target() {
            frame::xu_of(ds, i, &mut buf);
            nb_pred[i] = nb_fit.predict_row(&buf);
            if r.treatment == arm {
                sse_nb += (r.outcome - nb_pred[i]).powi(2);
                cnt_nb += 1;
                sse_fb += (r.outcome - fb_pred[i]).powi(2);
                cnt_fb += 1;
            }
        }
    }
    for &j in aux_pool {
        sse_fb += (ds.record(j).outcome - fb_pred[j]).powi(2);
        cnt_fb += 1;
    }
    let v_nb = if cnt_nb > 0 { sse_nb / cnt_nb as f64 } else { 0.0 };
    let v_fb = if cnt_fb > 0 { sse_fb / cnt_fb as f64 } else { 0.0 };
    let (w_nb, w_fb) = ivw_weights(v_nb, v_fb);
    let y_hat = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| if r.is_target() { w_nb * nb_pred[i] + w_fb * fb_pred[i] } else { fb_pred[i] })
        .collect();
    IvwPrediction { y_hat, w_nb, w_fb, v_nb, v_fb }
}

/// Weights `(v_fb, v_nb) / (v_nb + v_fb)`; equal weights when both errors vanish.
pub fn ivw_weights(v_nb: f64, v_fb: f64) -> (f64, f64) {
    let total = v_nb + v_fb;
    if total <= 0.0 {
        return (0.5, 0.5);
    }
    let w_nb = v_fb / total;
    if w_nb <= 0.5 {
        (w_nb, 1.0 - w_nb)
    } else {
        let w_fb = v_nb / total;
        (1.0 - w_fb, w_fb)
    }
}

/// IVW predictions for arm `arm`: `nb_fit` is the target-only (X, U) model and
/// `fb_fit` the pooled X-only model, whose error is averaged over all arm rows.
pub fn ivw_predictions(ds: &StudyDataset, arm: u8, nb_fit: &LinearModelFit, fb_fit: &LinearModelFit) -> Result<IvwPrediction> {
    let pu = ds.schema().target_only_names.len();
    let px = ds.schema().shared_names.len();
    if nb_fit.width() != px + pu || fb_fit.width() != px {
        return Err(Error::dimension("IVW inputs: model widths do not match the schema"));
    }
    let pool = aux_arm_rows(ds, arm);
    Ok(ivw_predictions_pool(ds, arm, nb_fit, fb_fit, &pool))
}

/// Intermediate quantities of the FB-IVW estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct FbIvwDetails {
    /// `[arm 0, arm 1]`.
    pub ivw: [IvwPrediction; 2],
    pub pi_hat: Vec<f64>,
    /// Per arm: target-only weighted mean, prediction term over target rows,
    /// and the auxiliary augmentation term. They sum to `theta_a`.
    pub decomposition: [[f64; 3]; 2],
}

/// Splits the FB-IVW arm estimate into a target-only term plus two
/// augmentation terms.
pub fn augmentation_decomposition(
    ds: &StudyDataset,
    design: &DesignPropensity,
    arm: u8,
    y_hat: &[f64],
    pi_hat: &[f64],
) -> [f64; 3] {
    let n_target = ds.n_target() as f64;
    let mut terms = [0.0; 3];
    for (i, r) in ds.records().iter().enumerate() {
        let w = if r.treatment == arm { pi_hat[i] / design.arm_prob(i, r, arm) } else { 0.0 };
        if r.is_target() {
            terms[0] += w * r.outcome;
            terms[1] += (1.0 - w) * y_hat[i];
        } else {
            terms[2] += w * (r.outcome - y_hat[i]);
        }
    }
    terms.map(|t| t / n_target)
}

/// FB-IVW with its intermediate quantities.
pub fn estimate_fb_ivw_detailed(
    ds: &StudyDataset,
    design: &DesignPropensity,
    opts: &EstimatorOptions,
) -> Result<(TauEstimate, FbIvwDetails)> {
    check_target_arms(ds)?;
    design.check(ds)?;
    let mut flags = Vec::new();
    if ds.n_aux() == 0 {
        flags.push("no auxiliary records; full borrowing reduces to the target-only structure".into());
    }
    let pi = sampling_scores(ds, opts, &mut flags)?;
    let mut arms = Vec::with_capacity(2);
    let mut ivws = Vec::with_capacity(2);
    let mut decomposition = [[0.0; 3]; 2];
    for a in [0u8, 1] {
        let nb_fit = fit_outcome(ds, &target_arm_rows(ds, a), true, &mut flags)?;
        let fb_fit = fit_outcome(ds, &ds.indices_where(|r| r.treatment == a), false, &mut flags)?;
        let ivw = ivw_predictions_pool(ds, a, &nb_fit, &fb_fit, &aux_arm_rows(ds, a));
        arms.push(arm_from_parts(ds, a, &ivw.y_hat, &borrowing_weights(ds, design, a, &pi)));
        decomposition[a as usize] = augmentation_decomposition(ds, design, a, &ivw.y_hat, &pi);
        ivws.push(ivw);
    }
    let t1 = arms.pop().unwrap();
    let t0 = arms.pop().unwrap();
    let est = combine_arms(ds, "FB-IVW", t1, t0, opts, flags);
    let ivw1 = ivws.pop().unwrap();
    let ivw0 = ivws.pop().unwrap();
    Ok((est, FbIvwDetails { ivw: [ivw0, ivw1], pi_hat: pi, decomposition }))
}

/// Doubly robust full-borrowing estimator using IVW-blended predictions.
pub fn estimate_fb_ivw(ds: &StudyDataset, design: &DesignPropensity, opts: &EstimatorOptions) -> Result<TauEstimate> {
    estimate_fb_ivw_detailed(ds, design, opts).map(|(e, _)| e)
}
