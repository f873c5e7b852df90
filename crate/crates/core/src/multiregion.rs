//! Borrowing from several auxiliary regions that record different subsets
//! of the shared covariates.
//!
//! Each auxiliary region `r` is paired with the target region and analysed
//! on its own covariate subset `X^(r)`. The per-region estimates are
//! correlated through the common target records; their covariance is
//! estimated from per-record influence values and the estimates are combined
//! with the variance-minimizing weights `Sigma^-1 1 / (1' Sigma^-1 1)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::csb::{self, CsbConfig};
use crate::data::{StudyDataset, TARGET_REGION};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_fb_ivw, influence_vector, ArmEstimate, DesignPropensity, EstimatorOptions, TauEstimate,
};
use crate::seed::{self, stage};

/// Flag attached to estimates combined from region-wise analyses.
pub const REGION_WISE_FLAG: &str = "region-wise-combination";

/// Shared covariates jointly observed with the target region, per
/// auxiliary region label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RegionCovariateMap {
    pub shared_of: BTreeMap<i64, Vec<String>>,
}

impl RegionCovariateMap {
    /// Builds a map from string region labels, as found in config files.
    pub fn from_string_keys(map: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut shared_of = BTreeMap::new();
        for (k, v) in map {
            let label: i64 = k.trim().parse().map_err(|_| Error::Config(format!("region label '{k}' is not an integer")))?;
            shared_of.insert(label, v.clone());
        }
        Ok(Self { shared_of })
    }

    /// Every auxiliary region of the dataset with the full shared set.
    pub fn full(dataset: &StudyDataset) -> Self {
        let names = dataset.schema().shared_names.clone();
        Self { shared_of: dataset.aux_regions().into_iter().map(|r| (r, names.clone())).collect() }
    }

    pub fn check(&self, dataset: &StudyDataset) -> Result<()> {
        if self.shared_of.is_empty() {
            return Err(Error::Config("region covariate map is empty".into()));
        }
        let present = dataset.aux_regions();
        for (r, names) in &self.shared_of {
            if *r == TARGET_REGION {
                return Err(Error::Config("the target region cannot appear in the region covariate map".into()));
            }
            if !present.contains(r) {
                return Err(Error::Config(format!("region {r} has no records in the dataset")));
            }
            for n in names {
                if dataset.schema().shared_index(n).is_none() {
                    return Err(Error::Config(format!("region {r}: unknown shared covariate '{n}'")));
                }
            }
        }
        Ok(())
    }
}

/// Estimate from one region pair plus its influence values on the full
/// dataset's scale (zero outside the pair).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFit {
    pub region: i64,
    pub estimate: TauEstimate,
    pub influence: Vec<f64>,
    /// Original indices of the records in the region pair.
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEstimates {
    pub labels: Vec<i64>,
    pub tau_hats: Vec<f64>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub n: usize,
    pub flags: Vec<String>,
}

fn pair_rows(dataset: &StudyDataset, region: i64) -> Result<Vec<usize>> {
    if !dataset.records().iter().any(|r| r.region == region) || region == TARGET_REGION {
        return Err(Error::precondition(format!("auxiliary region {region} is not present")));
    }
    Ok(dataset.indices_where(|r| r.is_target() || r.region == region))
}

/// Lifts an estimate on a sub-dataset to the full dataset: influence values
/// and contributions are rescaled from `n_sub` to `n` records.
fn lift(dataset: &StudyDataset, sub: &StudyDataset, rows: &[usize], region: i64, est: TauEstimate) -> RegionFit {
    let n = dataset.n() as f64;
    let scale = n / sub.n() as f64;
    let psi_sub = influence_vector(sub, &est);
    let mut influence = vec![0.0; dataset.n()];
    for (k, &i) in rows.iter().enumerate() {
        influence[i] = psi_sub[k] * scale;
    }
    let lift_arm = |a: &ArmEstimate| {
        let mut c = vec![0.0; dataset.n()];
        for (k, &i) in rows.iter().enumerate() {
            c[i] = a.contributions[k] * scale;
        }
        ArmEstimate { arm: a.arm, theta_hat: a.theta_hat, contributions: c }
    };
    let mut estimate = est.clone();
    estimate.theta1 = lift_arm(&est.theta1);
    estimate.theta0 = lift_arm(&est.theta0);
    if let Some([b0, b1]) = &est.borrowed_indices {
        estimate.borrowed_indices = Some([b0.iter().map(|&k| rows[k]).collect(), b1.iter().map(|&k| rows[k]).collect()]);
    }
    RegionFit { region, estimate, influence, rows: rows.to_vec() }
}

/// Full-borrowing IVW estimate from the target region and region `region`
/// on the covariates `shared`.
pub fn estimate_fb_ivw_region(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    region: i64,
    shared: &[String],
    opts: &EstimatorOptions,
) -> Result<RegionFit> {
    let rows = pair_rows(dataset, region)?;
    let sub = dataset.select(&rows).with_shared_subset(shared)?;
    let mut est = estimate_fb_ivw(&sub, &design.select(&rows), opts)?;
    if shared.is_empty() {
        est.flags.push("no shared covariates; nuisance models are intercept only".into());
    }
    Ok(lift(dataset, &sub, &rows, region, est))
}

/// `Sigma[s, t] = (1/n) sum_i psi_i^(s) psi_i^(t)`.
pub fn influence_covariance(influences: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let s = influences.len();
    if s == 0 {
        return Err(Error::precondition("no influence vectors"));
    }
    let n = influences[0].len();
    if influences.iter().any(|v| v.len() != n) {
        return Err(Error::dimension("influence vectors differ in length"));
    }
    let mut sigma = DMatrix::zeros(s, s);
    for a in 0..s {
        for b in a..s {
            let v = influences[a].iter().zip(&influences[b]).map(|(x, y)| x * y).sum::<f64>() / n as f64;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    Ok(sigma)
}

/// Variance-minimizing combination weights. The second value is set when a
/// ridge term was needed to factor `sigma`.
pub fn optimal_weights(sigma: &DMatrix<f64>) -> Result<(Vec<f64>, bool)> {
    let s = sigma.nrows();
    if s == 0 || sigma.ncols() != s {
        return Err(Error::dimension("covariance must be a non-empty square matrix"));
    }
    let ones = DVector::from_element(s, 1.0);
    let (chol, ridged) = match sigma.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let lambda = 1e-8 * sigma.trace() / s as f64;
            let lambda = if lambda > 0.0 { lambda } else { 1e-8 };
            let ridge = sigma + DMatrix::identity(s, s) * lambda;
            match ridge.cholesky() {
                Some(c) => (c, true),
                None => return Err(Error::Numerical("region covariance is not positive definite".into())),
            }
        }
    };
    let x = chol.solve(&ones);
    let total = x.sum();
    if !total.is_finite() || total == 0.0 {
        return Err(Error::Numerical("degenerate combination weights".into()));
    }
    Ok((x.iter().map(|v| v / total).collect(), ridged))
}

fn estimates_from_fits(fits: &[RegionFit], n: usize) -> Result<RegionEstimates> {
    let infl: Vec<Vec<f64>> = fits.iter().map(|f| f.influence.clone()).collect();
    let sigma = influence_covariance(&infl)?;
    let (weights, ridged) = optimal_weights(&sigma)?;
    let mut flags = Vec::new();
    if ridged {
        flags.push("region covariance was ridge-regularized".into());
    }
    Ok(RegionEstimates {
        labels: fits.iter().map(|f| f.region).collect(),
        tau_hats: fits.iter().map(|f| f.estimate.tau_hat).collect(),
        sigma_hat: (0..sigma.nrows()).map(|r| sigma.row(r).iter().copied().collect()).collect(),
        weights: Some(weights),
        n,
        flags,
    })
}

/// Combined estimate `d' tau` with variance `d' Sigma d / n`.
pub fn combine(estimates: &RegionEstimates, fits: &[RegionFit], method: &str, alpha: f64) -> Result<TauEstimate> {
    let d = estimates.weights.as_ref().ok_or_else(|| Error::precondition("combination weights are missing"))?;
    if d.len() != fits.len() || d.len() != estimates.tau_hats.len() {
        return Err(Error::dimension("weights do not match the region estimates"));
    }
    let s = d.len();
    let mut var = 0.0;
    for a in 0..s {
        for b in 0..s {
            var += d[a] * estimates.sigma_hat[a][b] * d[b];
        }
    }
    let n = estimates.n;
    let weigh_arm = |pick: fn(&TauEstimate) -> &ArmEstimate, arm: u8| {
        let mut c = vec![0.0; n];
        let mut theta = 0.0;
        for (w, f) in d.iter().zip(fits) {
            let a = pick(&f.estimate);
            theta += w * a.theta_hat;
            for (ci, ai) in c.iter_mut().zip(&a.contributions) {
                *ci += w * ai;
            }
        }
        ArmEstimate { arm, theta_hat: theta, contributions: c }
    };
    let t1 = weigh_arm(|e| &e.theta1, 1);
    let t0 = weigh_arm(|e| &e.theta0, 0);
    let mut est = TauEstimate::from_arms(method, t1, t0, (var.max(0.0) / n as f64).sqrt(), alpha);
    // the convex combination of the region estimates, kept exact
    est.tau_hat = d.iter().zip(&estimates.tau_hats).map(|(w, t)| w * t).sum();
    let (lo, hi) = crate::estimators::confidence_interval(est.tau_hat, var, n, alpha);
    est.ci_lower = lo;
    est.ci_upper = hi;
    est.flags = estimates.flags.clone();
    for f in fits {
        est.flags.extend(f.estimate.flags.iter().map(|m| format!("region {}: {m}", f.region)));
    }
    Ok(est)
}

/// Region-wise full-borrowing estimates.
pub fn fb_ivw_by_region(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    map: &RegionCovariateMap,
    opts: &EstimatorOptions,
) -> Result<(RegionEstimates, Vec<RegionFit>)> {
    map.check(dataset)?;
    let fits = map
        .shared_of
        .iter()
        .map(|(&r, names)| estimate_fb_ivw_region(dataset, design, r, names, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok((estimates_from_fits(&fits, dataset.n())?, fits))
}

/// Optimally combined full-borrowing estimate over auxiliary regions.
pub fn estimate_fb_ivw_multiregion(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    map: &RegionCovariateMap,
    opts: &EstimatorOptions,
) -> Result<TauEstimate> {
    let (est, fits) = fb_ivw_by_region(dataset, design, map, opts)?;
    combine(&est, &fits, "MR-FB-IVW", opts.alpha)
}

/// Region-wise selective borrowing: the conformal pipeline is run on each
/// region pair with that region's covariates, then the estimates are
/// combined with the optimal weights.
pub fn select_by_region_detailed(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    map: &RegionCovariateMap,
    config: &CsbConfig,
    seed: u64,
) -> Result<(TauEstimate, RegionEstimates, Vec<RegionFit>)> {
    map.check(dataset)?;
    let mut fits = Vec::with_capacity(map.shared_of.len());
    for (k, (&r, names)) in map.shared_of.iter().enumerate() {
        let rows = pair_rows(dataset, r)?;
        let sub = dataset.select(&rows).with_shared_subset(names)?;
        let est = csb::csb_pipeline(&sub, &design.select(&rows), config, seed::derive(seed, &[stage::REGION, k as u64]))?;
        fits.push(lift(dataset, &sub, &rows, r, est));
    }
    let estimates = estimates_from_fits(&fits, dataset.n())?;
    let mut est = combine(&estimates, &fits, "MR-CSB-IVW", config.estimator.alpha)?;
    let mut borrowed = [Vec::new(), Vec::new()];
    for f in &fits {
        if let Some([b0, b1]) = &f.estimate.borrowed_indices {
            borrowed[0].extend_from_slice(b0);
            borrowed[1].extend_from_slice(b1);
        }
        if let Some([g0, g1]) = f.estimate.gamma {
            est.flags.push(format!("region {}: thresholds ({g0}, {g1})", f.region));
        }
    }
    borrowed[0].sort_unstable();
    borrowed[1].sort_unstable();
    est.borrowed_indices = Some(borrowed);
    est.flags.push(REGION_WISE_FLAG.into());
    Ok((est, estimates, fits))
}

pub fn select_by_region(
    dataset: &StudyDataset,
    design: &DesignPropensity,
    map: &RegionCovariateMap,
    config: &CsbConfig,
    seed: u64,
) -> Result<TauEstimate> {
    select_by_region_detailed(dataset, design, map, config, seed).map(|(e, _, _)| e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateSchema, TrialRecord};
    use rand_distr::{Distribution, Normal};

    fn dataset(seed: u64) -> StudyDataset {
        let mut rng = seed::rng(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let mut recs = Vec::new();
        for (region, count) in [(1i64, 40), (2, 50), (3, 50)] {
            for k in 0..count {
                let x: Vec<f64> = (0..2).map(|_| nrm.sample(&mut rng)).collect();
                let u = nrm.sample(&mut rng);
                let a = (k % 2) as u8;
                let y = x[0] - x[1] + u + a as f64 + nrm.sample(&mut rng);
                recs.push(TrialRecord { region, treatment: a, outcome: y, x, u: (region == 1).then_some(vec![u]) });
            }
        }
        StudyDataset::new(CovariateSchema::new(["X1", "X2"], ["U"]), recs).unwrap()
    }

    #[test]
    fn weights_hand_cases() {
        let w = |m: &[f64]| optimal_weights(&DMatrix::from_row_slice(2, 2, m)).unwrap().0;
        assert_eq!(w(&[1.0, 0.0, 0.0, 1.0]), vec![0.5, 0.5]);
        let d = w(&[1.0, 0.0, 0.0, 3.0]);
        assert!((d[0] - 0.75).abs() < 1e-12 && (d[1] - 0.25).abs() < 1e-12);
        let d = w(&[1.0, 0.5, 0.5, 1.0]);
        assert!((d[0] - 0.5).abs() < 1e-12);
        let (d, ridged) = optimal_weights(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(ridged);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn covariance_cases() {
        let v = vec![1.0, -2.0, 0.5];
        let s = influence_covariance(&[v.clone(), v.clone()]).unwrap();
        assert!(s.iter().all(|x| (x - s[(0, 0)]).abs() < 1e-15));
        let s = influence_covariance(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(s[(0, 1)].abs() < 1e-10);
        assert!(influence_covariance(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn single_region_reduces() {
        let ds = dataset(3);
        let two = ds.select(&ds.indices_where(|r| r.region != 3));
        let d = DesignPropensity::default();
        let o = EstimatorOptions::default();
        let fb = estimate_fb_ivw(&two, &d, &o).unwrap();
        let map = RegionCovariateMap::full(&two);
        let fit = estimate_fb_ivw_region(&two, &d, 2, &two.schema().shared_names, &o).unwrap();
        assert!((fit.estimate.tau_hat - fb.tau_hat).abs() < 1e-10);
        let (re, fits) = fb_ivw_by_region(&two, &d, &map, &o).unwrap();
        assert!((re.sigma_hat[0][0] / two.n() as f64 - fb.se.powi(2)).abs() < 1e-8);
        let comb = combine(&re, &fits, "MR-FB-IVW", 0.05).unwrap();
        assert!((comb.tau_hat - fb.tau_hat).abs() < 1e-10);
        assert!((comb.se - fb.se).abs() < 1e-10);
    }

    #[test]
    fn region_estimates_ignore_other_regions() {
        let ds = dataset(5);
        let d = DesignPropensity::default();
        let o = EstimatorOptions::default();
        let names = vec!["X1".to_string()];
        let a = estimate_fb_ivw_region(&ds, &d, 2, &names, &o).unwrap();
        let only = ds.select(&ds.indices_where(|r| r.region != 3));
        let b = estimate_fb_ivw_region(&only, &d, 2, &names, &o).unwrap();
        assert!((a.estimate.tau_hat - b.estimate.tau_hat).abs() < 1e-12);
        assert!(estimate_fb_ivw_region(&ds, &d, 9, &names, &o).is_err());
        let empty = estimate_fb_ivw_region(&ds, &d, 2, &[], &o).unwrap();
        assert!(empty.estimate.tau_hat.is_finite());
        assert!(!empty.estimate.flags.is_empty());
    }

    #[test]
    fn combination_properties() {
        let ds = dataset(7);
        let d = DesignPropensity::default();
        let o = EstimatorOptions::default();
        let mut map = RegionCovariateMap::default();
        map.shared_of.insert(2, vec!["X1".into()]);
        map.shared_of.insert(3, vec!["X2".into()]);
        let (re, fits) = fb_ivw_by_region(&ds, &d, &map, &o).unwrap();
        let w = re.weights.clone().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let comb = combine(&re, &fits, "MR-FB-IVW", 0.05).unwrap();
        let var = (comb.se.powi(2)) * ds.n() as f64;
        for k in 0..2 {
            assert!(var <= re.sigma_hat[k][k] + 1e-12);
        }
        let lo = re.tau_hats.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = re.tau_hats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if w.iter().all(|&x| x >= 0.0) {
            assert!(comb.tau_hat >= lo - 1e-12 && comb.tau_hat <= hi + 1e-12);
        }
        let bad = RegionCovariateMap { shared_of: [(2, vec!["Z".to_string()])].into_iter().collect() };
        assert!(bad.check(&ds).is_err());
    }

    #[test]
    fn selective_multiregion_runs() {
        let ds = dataset(9);
        let map = RegionCovariateMap::full(&ds);
        let cfg = CsbConfig { n_boot: 4, folds: 4, ..CsbConfig::default() };
        let d = DesignPropensity::default();
        let a = select_by_region(&ds, &d, &map, &cfg, 1).unwrap();
        let b = select_by_region(&ds, &d, &map, &cfg, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.flags.iter().any(|f| f == REGION_WISE_FLAG));
        for &j in a.borrowed_indices.as_ref().unwrap().iter().flatten() {
            assert!(!ds.record(j).is_target());
        }
    }
}
