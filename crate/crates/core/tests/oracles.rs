//! Library results against independent reference computations.

mod common;

use common::*;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rsate::conformal::{self, fold_seed};
use rsate::csb::{self, CsbVariant};
use rsate::data::{self, CovariateSchema, StudyDataset, TrialRecord};
use rsate::estimators::{self, DesignPropensity, EstimatorOptions};
use rsate::models::{self, Predictor};
use rsate::multiregion::{self, RegionCovariateMap};
use rsate::seed;
use rsate::sim::{AuxRegionSpec, DgpConfig};

fn z(rng: &mut seed::Rng) -> f64 {
    StandardNormal.sample(rng)
}

const DESIGN: DesignPropensity = DesignPropensity::Constant { p: 0.5 };

#[test]
fn linear_fit_matches_normal_equations() {
    let mut rng = seed::rng(1);
    for _ in 0..20 {
        let n = rng.random_range(10..80);
        let p = rng.random_range(1..5);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| z(&mut rng)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| 1.0 + r.iter().sum::<f64>() + 0.3 * z(&mut rng)).collect();
        let feats = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        let fit = models::fit_linear(&feats, &y).unwrap();
        let want = normal_equations(&rows, &y);
        for (a, b) in fit.coefficients.iter().zip(&want) {
            assert!(close(*a, *b, 1e-8), "{a} vs {b}");
        }
    }
}

#[test]
fn logistic_fit_beats_a_likelihood_grid() {
    let mut rng = seed::rng(2);
    for _ in 0..5 {
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| z(&mut rng)).collect();
        let labels: Vec<u8> = x.iter().map(|&v| rng.random_bool(models::sigmoid(0.3 + 1.2 * v)) as u8).collect();
        let feats = DMatrix::from_column_slice(n, 1, &x);
        let fit = models::fit_logistic(&feats, &labels, 100, 1e-10).unwrap();
        let best = models::log_likelihood(&feats, &labels, &fit.coefficients);
        for i in -40..=40 {
            for j in -40..=40 {
                let c = [fit.coefficients[0] + i as f64 * 0.02, fit.coefficients[1] + j as f64 * 0.02];
                assert!(models::log_likelihood(&feats, &labels, &c) <= best + 1e-9);
            }
        }
    }
}

#[test]
fn nb_estimators_match_hand_computation() {
    for s in 0..5 {
        let ds = trial(&small_dgp(), s);
        for (with_u, est) in [
            (false, estimators::estimate_nb_xonly(&ds, &DESIGN, &EstimatorOptions::default()).unwrap()),
            (true, estimators::estimate_nb_allcov(&ds, &DESIGN, &EstimatorOptions::default()).unwrap()),
        ] {
            let (t1, raw1) = nb_arm_oracle(&ds, 1, 0.5, with_u);
            let (t0, raw0) = nb_arm_oracle(&ds, 0, 0.5, with_u);
            assert!(close(est.theta1.theta_hat, t1, 1e-9));
            assert!(close(est.theta0.theta_hat, t0, 1e-9));
            assert!(close(est.tau_hat, t1 - t0, 1e-9));
            assert!(close(est.se, se_oracle(&ds, &raw1, &raw0, t1 - t0), 1e-9));
            let z = estimators::normal_quantile(0.975);
            assert!(close(est.ci_lower, est.tau_hat - z * est.se, 1e-9));
        }
    }
}

#[test]
fn fb_xonly_matches_hand_computation() {
    let opts = EstimatorOptions::default();
    for s in 0..5 {
        let ds = trial(&small_dgp(), 10 + s);
        let est = estimators::estimate_fb_xonly(&ds, &DESIGN, &opts).unwrap();
        let pi_fit = estimators::fit_sampling_model(&ds, &opts).unwrap();
        let pi: Vec<f64> = ds.records().iter().map(|r| pi_fit.predict_row(&r.x).clamp(0.01, 0.99)).collect();
        let mut raws = Vec::new();
        for arm in [0u8, 1] {
            let rows = ds.indices_where(|r| r.treatment == arm);
            let beta = normal_equations(
                &rows.iter().map(|&i| ds.record(i).x.clone()).collect::<Vec<_>>(),
                &rows.iter().map(|&i| ds.record(i).outcome).collect::<Vec<_>>(),
            );
            let raw: Vec<f64> = (0..ds.n())
                .map(|i| {
                    let r = ds.record(i);
                    let yh = predict(&beta, &r.x);
                    let w = if r.treatment == arm { pi[i] / 0.5 } else { 0.0 };
                    (if r.is_target() { yh } else { 0.0 }) + w * (r.outcome - yh)
                })
                .collect();
            raws.push(raw);
        }
        let nr = ds.n_target() as f64;
        let t1 = raws[1].iter().sum::<f64>() / nr;
        let t0 = raws[0].iter().sum::<f64>() / nr;
        assert!(close(est.tau_hat, t1 - t0, 1e-8), "{} vs {}", est.tau_hat, t1 - t0);
        assert!(close(est.se, se_oracle(&ds, &raws[1], &raws[0], t1 - t0), 1e-8));
    }
}

#[test]
fn ivw_weights_are_inverse_variance() {
    let (w_nb, w_fb) = estimators::ivw_weights(2.0, 6.0);
    assert!(close(w_nb, (1.0 / 2.0) / (1.0 / 2.0 + 1.0 / 6.0), 1e-15));
    assert!(close(w_fb, 0.25, 1e-15));
    assert_eq!(estimators::ivw_weights(0.0, 0.0), (0.5, 0.5));
}

#[test]
fn fb_ivw_decomposition_sums_to_estimate() {
    for s in 0..10 {
        let ds = trial(&small_dgp(), 20 + s);
        let (est, det) = estimators::estimate_fb_ivw_detailed(&ds, &DESIGN, &EstimatorOptions::default()).unwrap();
        for (arm, theta) in [(0, est.theta0.theta_hat), (1, est.theta1.theta_hat)] {
            let sum: f64 = det.decomposition[arm].iter().sum();
            assert!((sum - theta).abs() <= 1e-10 * (1.0 + theta.abs()), "{sum} vs {theta}");
        }
    }
}

#[test]
fn influence_covariance_reproduces_single_variance() {
    for s in 0..5 {
        let ds = trial(&small_dgp(), 30 + s);
        for est in [
            estimators::estimate_nb_allcov(&ds, &DESIGN, &EstimatorOptions::default()).unwrap(),
            estimators::estimate_fb_ivw(&ds, &DESIGN, &EstimatorOptions::default()).unwrap(),
        ] {
            let psi = estimators::influence_vector(&ds, &est);
            let sigma = multiregion::influence_covariance(&[psi]).unwrap();
            let var = sigma[(0, 0)] / ds.n() as f64;
            assert!(close(var, est.se * est.se, 1e-8), "{var} vs {}", est.se * est.se);
        }
    }
}

#[test]
fn optimal_weights_match_two_by_two_formula() {
    let mut rng = seed::rng(3);
    for _ in 0..100 {
        let a = DMatrix::from_fn(2, 2, |_, _| z(&mut rng));
        let sigma = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
        let (w, ridged) = multiregion::optimal_weights(&sigma).unwrap();
        assert!(!ridged);
        let (s11, s12, s22) = (sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 1)]);
        let w1 = (s22 - s12) / (s11 + s22 - 2.0 * s12);
        assert!((w[0] - w1).abs() <= 1e-8);
        assert!((w[1] - (1.0 - w1)).abs() <= 1e-8);
    }
}

#[test]
fn cvplus_pvalues_match_direct_computation() {
    for s in 0..3 {
        let ds = trial(&small_dgp(), 40 + s);
        let k = 10;
        let pv = conformal::conformal_pvalues(&ds, k, 99).unwrap();
        for arm in [0u8, 1] {
            let target = ds.indices_where(|r| r.is_target() && r.treatment == arm);
            let aux = ds.indices_where(|r| !r.is_target() && r.treatment == arm);
            let folds = models::kfold_split(&target, k, fold_seed(99, arm)).unwrap();
            let betas: Vec<Vec<f64>> = (1..=k)
                .map(|f| {
                    let train: Vec<usize> = target.iter().copied().filter(|i| folds.fold_of[i] != f).collect();
                    normal_equations(
                        &train.iter().map(|&i| ds.record(i).x.clone()).collect::<Vec<_>>(),
                        &train.iter().map(|&i| ds.record(i).outcome).collect::<Vec<_>>(),
                    )
                })
                .collect();
            let res = |f: usize, j: usize| (ds.record(j).outcome - predict(&betas[f - 1], &ds.record(j).x)).abs();
            for &j in &aux {
                let hits = target.iter().filter(|&&i| res(folds.fold_of[&i], i) >= res(folds.fold_of[&i], j)).count();
                let want = (hits + 1) as f64 / (target.len() + 1) as f64;
                assert_eq!(pv.get(j), want, "record {j}");
            }
            for &i in &target {
                assert_eq!(pv.get(i), 1.0);
            }
        }
    }
}

#[test]
fn csb_collapses_to_full_and_no_borrowing() {
    let opts = EstimatorOptions::default();
    for s in 0..5 {
        let ds = trial(&small_dgp(), 50 + s);
        let pv = conformal::conformal_pvalues(&ds, 10, s).unwrap();
        let fb = estimators::estimate_fb_ivw(&ds, &DESIGN, &opts).unwrap();
        let nb = estimators::estimate_nb_allcov(&ds, &DESIGN, &opts).unwrap();
        let c0 = csb::estimate_csb(&ds, &DESIGN, &pv, 0.0, 0.0, CsbVariant::Ivw, &opts).unwrap();
        let c1 = csb::estimate_csb(&ds, &DESIGN, &pv, 1.0, 1.0, CsbVariant::Ivw, &opts).unwrap();
        assert!((c0.tau_hat - fb.tau_hat).abs() <= 1e-8);
        assert!((c0.se - fb.se).abs() <= 1e-8);
        assert!((c1.tau_hat - nb.tau_hat).abs() <= 1e-8);
        assert!((c1.se - nb.se).abs() <= 1e-8);
    }
}

#[test]
fn difference_in_means_by_hand() {
    let ds = trial(&small_dgp(), 60);
    let est = data::difference_in_means(&ds, 0.05).unwrap();
    let ys = |a: u8| -> Vec<f64> { ds.records().iter().filter(|r| r.is_target() && r.treatment == a).map(|r| r.outcome).collect() };
    let (y1, y0) = (ys(1), ys(0));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(close(est.tau_hat, mean(&y1) - mean(&y0), 1e-12));
    let se = (var(&y1) / y1.len() as f64 + var(&y0) / y0.len() as f64).sqrt();
    assert!(close(est.se, se, 1e-9), "{} vs {se}", est.se);
}

#[test]
fn region_pair_estimate_equals_single_region_fit() {
    let cfg = DgpConfig { n_target: 150, covariate_shift: false, ..DgpConfig::default() };
    let regions = [AuxRegionSpec { label: 2, n: 150, rho: 0.0, b0: 0.0, b1: 0.0 }];
    let ds = rsate::sim::generate_multiregion_trial(&cfg, &regions, 5).unwrap().dataset;
    let map = RegionCovariateMap::full(&ds);
    let (re, fits) = multiregion::fb_ivw_by_region(&ds, &DESIGN, &map, &EstimatorOptions::default()).unwrap();
    let direct = estimators::estimate_fb_ivw(&ds, &DESIGN, &EstimatorOptions::default()).unwrap();
    assert!(close(re.tau_hats[0], direct.tau_hat, 1e-10));
    assert!(close(fits[0].estimate.se, direct.se, 1e-8));
    assert_eq!(re.weights.as_deref(), Some(&[1.0][..]));
}

#[test]
fn difference_in_means_ignores_covariates() {
    let recs = vec![
        TrialRecord { region: 1, treatment: 1, outcome: 3.0, x: vec![0.0], u: Some(vec![1.0]) },
        TrialRecord { region: 1, treatment: 1, outcome: 5.0, x: vec![9.0], u: Some(vec![1.0]) },
        TrialRecord { region: 1, treatment: 0, outcome: 1.0, x: vec![2.0], u: Some(vec![1.0]) },
        TrialRecord { region: 1, treatment: 0, outcome: 2.0, x: vec![4.0], u: Some(vec![1.0]) },
    ];
    let ds = StudyDataset::new(CovariateSchema::new(["X1"], ["U"]), recs).unwrap();
    assert_eq!(data::difference_in_means(&ds, 0.05).unwrap().tau_hat, 2.5);
}
