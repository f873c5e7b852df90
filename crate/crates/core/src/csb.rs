//! Conformal selective borrowing: borrow only the auxiliary records whose
//! conformal p-value reaches a threshold, with the threshold of each arm
//! chosen by minimizing a bootstrap estimate of the arm estimator's MSE.
//!
//! At a fixed pair of thresholds the estimator is the full-borrowing
//! estimator with the auxiliary records of arm `a` replaced by the selected
//! subset: the sampling model, the pooled outcome model and its error
//! variance are refitted on that subset, and the augmentation weight is
//! `pi(X) / e(X)` where `e` models P(A = a, selected | X). Selecting every
//! auxiliary record gives back the full-borrowing estimator and selecting
//! none gives back the target-only estimator.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{self, PValueTable};
use crate::data::StudyDataset;
use crate::error::{Error, Result};
use crate::estimators::{
    arm_from_parts, aux_arm_rows, check_target_arms, combine_arms, fit_membership, fit_outcome, ivw_predictions_pool,
    nb_arm, predict_x_all, target_arm_rows, ArmEstimate, DesignPropensity, EstimatorOptions, TauEstimate,
};
use crate::seed::{self, stage};

/// Which covariate adjustment the selective estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsbVariant {
    /// IVW blend of the target (X, U) model and the pooled X model.
    Ivw,
    /// Pooled X-only outcome model.
    Xonly,
}

impl CsbVariant {
    pub fn method(self) -> &'static str {
        match self {
            CsbVariant::Ivw => "CSB-IVW",
            CsbVariant::Xonly => "CSB-Xonly",
        }
    }

    /// Name of the target-only estimator the variant reduces to.
    pub fn benchmark(self) -> &'static str {
        match self {
            CsbVariant::Ivw => "NB-AllCov",
            CsbVariant::Xonly => "NB-Xonly",
        }
    }

    fn uses_u(self) -> bool {
        matches!(self, CsbVariant::Ivw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSet {
    pub arm: u8,
    pub gamma: f64,
    /// Auxiliary records of the arm with p-value at least `gamma`, ascending;
    /// empty at `gamma = 1`.
    pub indices: Vec<usize>,
}

pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsbConfig {
    pub folds: usize,
    pub grid: Vec<f64>,
    /// Bootstrap resamples per MSE curve.
    pub n_boot: usize,
    pub variant: CsbVariant,
    pub estimator: EstimatorOptions,
}

impl Default for CsbConfig {
    fn default() -> Self {
        Self {
            folds: conformal::DEFAULT_FOLDS,
            grid: default_grid(),
            n_boot: 100,
            variant: CsbVariant::Ivw,
            estimator: EstimatorOptions::default(),
        }
    }
}

impl CsbConfig {
    pub fn check(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("threshold grid is empty".into()));
        }
        if self.grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Config("threshold grid values must lie in [0, 1]".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("threshold grid must be strictly increasing".into()));
        }
        if self.n_boot < 2 {
            return Err(Error::Config("at least two bootstrap resamples are required".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("at least two conformal folds are required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseCurve {
    pub arm: u8,
    pub grid: Vec<f64>,
    pub mse_hat: Vec<f64>,
    /// Squared distance to the target-only estimate on the original data.
    pub sq_diff: Vec<f64>,
    /// Bootstrap variance of the difference to the target-only estimate.
    pub var_diff: Vec<f64>,
    /// Bootstrap variance of the selective estimate.
    pub var_csb: Vec<f64>,
    /// Resamples that entered the variances.
    pub n_boot: usize,
    pub seed: u64,
    pub flags: Vec<String>,
}

/// One row of the plotting table of a curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub arm: u8,
    pub gamma: f64,
    pub mse_hat: f64,
    pub sq_diff: f64,
    pub var_diff: f64,
    pub var_csb: f64,
}

impl MseCurve {
    pub fn rows(&self) -> Vec<MseRow> {
        (0..self.grid.len())
            .map(|k| MseRow {
                arm: self.arm,
                gamma: self.grid[k],
                mse_hat: self.mse_hat[k],
                sq_diff: self.sq_diff[k],
                var_diff: self.var_diff[k],
                var_csb: self.var_csb[k],
            })
            .collect()
    }
}

pub fn select_set(dataset: &StudyDataset, pvalues: &PValueTable, arm: u8, gamma: f64) -> Result<SelectedSet> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::precondition(format!("threshold {gamma} is outside [0, 1]")));
    }
    if pvalues.p.len() != dataset.n() {
        return Err(Error::dimension("p-value table does not match the dataset"));
    }
    // gamma = 1 is the no-borrowing end of the grid, even for records with p = 1
    if gamma >= 1.0 {
        return Ok(SelectedSet { arm, gamma, indices: Vec::new() });
    }
    let indices = aux_arm_rows(dataset, arm).into_iter().filter(|&j| pvalues.get(j) >= gamma).collect();
    Ok(SelectedSet { arm, gamma, indices })
}

/// Arm estimate borrowing exactly the auxiliary records in `selected`.
pub(crate) fn csb_arm(
    ds: &StudyDataset,
    design: &DesignPropensity,
    arm: u8,
    selected: &[usize],
    variant: CsbVariant,
    opts: &EstimatorOptions,
    flags: &mut Vec<String>,
) -> Result<ArmEstimate> {
    if selected.is_empty() {
        return nb_arm(ds, design, arm, variant.uses_u(), flags);
    }
    let all_aux = aux_arm_rows(ds, arm);
    let everything = selected.len() == all_aux.len();
    let mut in_selection = vec![false; ds.n()];
    for &j in selected {
        in_selection[j] = true;
    }
    // Base population: all records except the unselected auxiliary records of this arm.
    let base: Vec<usize> = (0..ds.n())
        .filter(|&i| {
            let r = ds.record(i);
            r.is_target() || r.treatment != arm || in_selection[i]
        })
        .collect();
    let pi_fit = fit_membership(ds, &base, |i| ds.record(i).is_target(), opts, "selective sampling model", flags)?;
    let pi = predict_x_all(ds, &pi_fit);

    let mut borrow_rows = target_arm_rows(ds, arm);
    borrow_rows.extend_from_slice(selected);
    borrow_rows.sort_unstable();

    let weight: Vec<f64> = if everything {
        // P(A = a, selected | X) is the design probability itself.
        (0..ds.n())
            .map(|i| {
                let r = ds.record(i);
                if r.treatment == arm {
                    pi[i] / design.arm_prob(i, r, arm)
                } else {
                    0.0
                }
            })
            .collect()
    } else {
        let e_fit = fit_membership(
            ds,
            &base,
            |i| {
                let r = ds.record(i);
                r.treatment == arm && (r.is_target() || in_selection[i])
            },
            opts,
            "selection propensity model",
            flags,
        )?;
        let mut w = vec![0.0; ds.n()];
        for &i in &borrow_rows {
            w[i] = pi[i] / crate::models::Predictor::predict_row(&e_fit, &ds.record(i).x);
        }
        w
    };

    let pooled = fit_outcome(ds, &borrow_rows, false, flags)?;
    let y_hat = match variant {
        CsbVariant::Xonly => predict_x_all(ds, &pooled),
        CsbVariant::Ivw => {
            let target_fit = fit_outcome(ds, &target_arm_rows(ds, arm), true, flags)?;
            ivw_predictions_pool(ds, arm, &target_fit, &pooled, selected).y_hat
        }
    };
    Ok(arm_from_parts(ds, arm, &y_hat, &weight))
}

/// Selective estimator at thresholds `gamma0` (control) and `gamma1` (treated).
pub fn estimate_csb(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    pvalues: &PValueTable,
    gamma0: f64,
    gamma1: f64,
    variant: CsbVariant,
    opts: &EstimatorOptions,
) -> Result<TauEstimate> {
    check_target_arms(dataset)?;
    design.check(dataset)?;
    let s0 = select_set(dataset, pvalues, 0, gamma0)?;
    let s1 = select_set(dataset, pvalues, 1, gamma1)?;
    let mut flags = Vec::new();
    for s in [&s0, &s1] {
        if s.indices.is_empty() {
            flags.push(format!("arm {}: nothing selected, target-only arm estimate", s.arm));
        }
    }
    let t1 = csb_arm(dataset, design, 1, &s1.indices, variant, opts, &mut flags)?;
    let t0 = csb_arm(dataset, design, 0, &s0.indices, variant, opts, &mut flags)?;
    let mut est = combine_arms(dataset, variant.method(), t1, t0, opts, flags);
    est.borrowed_indices = Some([s0.indices, s1.indices]);
    est.gamma = Some([gamma0, gamma1]);
    Ok(est)
}

pub fn estimate_csb_ivw(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    pvalues: &PValueTable,
    gamma0: f64,
    gamma1: f64,
    opts: &EstimatorOptions,
) -> Result<TauEstimate> {
    estimate_csb(dataset, design, pvalues, gamma0, gamma1, CsbVariant::Ivw, opts)
}

/// Arm estimates over the grid plus the target-only benchmark.
struct GridEstimates {
    csb: Vec<f64>,
    nb: f64,
}

fn grid_estimates(
    ds: &StudyDataset,
    design: &DesignPropensity,
    pvalues: &PValueTable,
    arm: u8,
    grid: &[f64],
    variant: CsbVariant,
    opts: &EstimatorOptions,
) -> Result<GridEstimates> {
    let mut flags = Vec::new();
    let aux = aux_arm_rows(ds, arm);
    // selected sets are nested in the threshold, so their size identifies them
    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    let nb = nb_arm(ds, design, arm, variant.uses_u(), &mut flags)?.theta_hat;
    cache.insert(0, nb);
    let mut csb = Vec::with_capacity(grid.len());
    for &g in grid {
        let sel: Vec<usize> = aux.iter().copied().filter(|&j| pvalues.get(j) >= g).collect();
        let theta = match cache.get(&sel.len()) {
            Some(&t) => t,
            None => {
                let t = csb_arm(ds, design, arm, &sel, variant, opts, &mut flags)?.theta_hat;
                cache.insert(sel.len(), t);
                t
            }
        };
        csb.push(theta);
    }
    Ok(GridEstimates { csb, nb })
}

/// Nonparametric bootstrap resample stratified by (region, arm).
pub fn stratified_resample(dataset: &StudyDataset, rng: &mut seed::Rng) -> Vec<usize> {
    let mut strata: BTreeMap<(i64, u8), Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records().iter().enumerate() {
        strata.entry((r.region, r.treatment)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(dataset.n());
    for members in strata.values() {
        for _ in 0..members.len() {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    out
}

fn sample_variance(v: &[f64]) -> f64 {
    let l = v.len() as f64;
    let mean = v.iter().sum::<f64>() / l;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (l - 1.0)
}

/// Bootstrap MSE curves of both arms, sharing resamples.
pub fn mse_curves(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    pvalues: &PValueTable,
    config: &CsbConfig,
    seed: u64,
) -> Result<[MseCurve; 2]> {
    config.check()?;
    check_target_arms(dataset)?;
    let opts = &config.estimator;
    let original = [
        grid_estimates(dataset, design, pvalues, 0, &config.grid, config.variant, opts)?,
        grid_estimates(dataset, design, pvalues, 1, &config.grid, config.variant, opts)?,
    ];
    let replicates: Vec<Result<[GridEstimates; 2]>> = (0..config.n_boot)
        .into_par_iter()
        .map(|l| {
            let mut rng = seed::rng_at(seed, &[stage::BOOTSTRAP, l as u64, 0]);
            let idx = stratified_resample(dataset, &mut rng);
            let ds = dataset.select(&idx);
            let des = design.select(&idx);
            let pv = conformal::conformal_pvalues(&ds, config.folds, seed::derive(seed, &[stage::BOOTSTRAP, l as u64, 1]))?;
            Ok([
                grid_estimates(&ds, &des, &pv, 0, &config.grid, config.variant, opts)?,
                grid_estimates(&ds, &des, &pv, 1, &config.grid, config.variant, opts)?,
            ])
        })
        .collect();
    let mut flags = Vec::new();
    let mut ok = Vec::with_capacity(replicates.len());
    for (l, r) in replicates.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => flags.push(format!("bootstrap resample {l} skipped: {e}")),
        }
    }
    if ok.len() < 2 {
        return Err(Error::Numerical(format!("only {} bootstrap resamples succeeded", ok.len())));
    }
    let curve = |arm: usize| {
        let orig = &original[arm];
        let nb_boot: Vec<f64> = ok.iter().map(|r| r[arm].nb).collect();
        let var_nb = sample_variance(&nb_boot);
        let mut out = MseCurve {
            arm: arm as u8,
            grid: config.grid.clone(),
            mse_hat: Vec::new(),
            sq_diff: Vec::new(),
            var_diff: Vec::new(),
            var_csb: Vec::new(),
            n_boot: ok.len(),
            seed,
            flags: flags.clone(),
        };
        for (k, &g) in config.grid.iter().enumerate() {
            if g >= 1.0 {
                out.sq_diff.push(0.0);
                out.var_diff.push(0.0);
                out.var_csb.push(var_nb);
                out.mse_hat.push(var_nb);
                continue;
            }
            let boot: Vec<f64> = ok.iter().map(|r| r[arm].csb[k]).collect();
            let diff: Vec<f64> = ok.iter().map(|r| r[arm].csb[k] - r[arm].nb).collect();
            let sq = (orig.csb[k] - orig.nb).powi(2);
            let vd = sample_variance(&diff);
            let vc = sample_variance(&boot);
            out.sq_diff.push(sq);
            out.var_diff.push(vd);
            out.var_csb.push(vc);
            out.mse_hat.push(sq - vd + vc);
        }
        out
    };
    Ok([curve(0), curve(1)])
}

/// Bootstrap MSE curve of one arm.
pub fn mse_curve(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    pvalues: &PValueTable,
    arm: u8,
    config: &CsbConfig,
    seed: u64,
) -> Result<MseCurve> {
    let [c0, c1] = mse_curves(dataset, design, pvalues, config, seed)?;
    Ok(if arm == 0 { c0 } else { c1 })
}

/// Grid point with the smallest estimated MSE; ties go to the larger threshold.
pub fn choose_threshold(curve: &MseCurve) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (&g, &m) in curve.grid.iter().zip(&curve.mse_hat) {
        if m.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, bm)| m <= bm) {
            best = Some((g, m));
        }
    }
    best.map(|(g, _)| g).ok_or_else(|| Error::precondition("MSE curve has no finite values"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsbOutcome {
    pub estimate: TauEstimate,
    pub pvalues: PValueTable,
    pub curves: [MseCurve; 2],
}

/// Conformal p-values, per-arm thresholds, and the final selective estimate.
pub fn csb_pipeline_detailed(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    config: &CsbConfig,
    seed: u64,
) -> Result<CsbOutcome> {
    config.check()?;
    check_target_arms(dataset)?;
    design.check(dataset)?;
    let pvalues = conformal::conformal_pvalues(dataset, config.folds, seed)?;
    let curves = mse_curves(dataset, design, &pvalues, config, seed)?;
    let g0 = choose_threshold(&curves[0])?;
    let g1 = choose_threshold(&curves[1])?;
    let mut estimate = estimate_csb(dataset, design, &pvalues, g0, g1, config.variant, &config.estimator)?;
    estimate.flags.extend(pvalues.flags.iter().cloned());
    estimate.flags.extend(curves[0].flags.iter().cloned());
    Ok(CsbOutcome { estimate, pvalues, curves })
}

pub fn csb_pipeline(dataset: &StudyDataset, design: &DesignPropensity, config: &CsbConfig, seed: u64) -> Result<TauEstimate> {
    csb_pipeline_detailed(dataset, design, config, seed).map(|o| o.estimate)
}
