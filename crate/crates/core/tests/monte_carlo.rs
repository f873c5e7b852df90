//! Monte Carlo checks of the estimators, the conformal p-values, the
//! randomization test and the simulation design.
//!
//! The checks that rerun the full selective-borrowing pipeline hundreds of
//! times are ignored by default; run them with `cargo test -- --ignored`.

mod common;

use common::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rsate::conformal;
use rsate::csb::{self, CsbConfig};
use rsate::data::{self, CovariateSchema, StudyDataset, TrialRecord};
use rsate::estimators::{self, DesignPropensity, EstimatorOptions, TauEstimate};
use rsate::frt::{self, RandomizationScheme, Sided};
use rsate::models::Predictor;
use rsate::multiregion::{self, RegionCovariateMap};
use rsate::seed;
use rsate::sim::{self, AuxRegionSpec, BiasArms, CovariateScenario, DgpConfig};

const DESIGN: DesignPropensity = DesignPropensity::Constant { p: 0.5 };

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn mse(v: &[f64], truth: f64) -> f64 {
    v.iter().map(|t| (t - truth).powi(2)).sum::<f64>() / v.len() as f64
}

fn truth(cfg: &DgpConfig) -> sim::MonteCarloValue {
    sim::true_rsate(cfg, 1_000_000, 777).unwrap()
}

fn replicate<F>(cfg: &DgpConfig, reps: usize, base: u64, f: F) -> Vec<TauEstimate>
where
    F: Fn(&StudyDataset, u64) -> TauEstimate,
{
    (0..reps as u64).map(|r| f(&trial(cfg, base + r), base + r)).collect()
}

fn assert_unbiased(name: &str, est: &[TauEstimate], tau: sim::MonteCarloValue) {
    let taus: Vec<f64> = est.iter().map(|e| e.tau_hat).collect();
    let (m, se) = mean_se(&taus);
    let tol = 3.0 * (se * se + tau.mc_se * tau.mc_se).sqrt();
    assert!((m - tau.value).abs() <= tol, "{name}: mean {m} vs truth {} (tol {tol})", tau.value);
}

fn no_drift() -> DgpConfig {
    DgpConfig { rho: 0.0, ..small_dgp() }
}

#[test]
fn difference_in_means_is_unbiased() {
    // the effect is not constant in X, so covariate shift matters only
    // through the target distribution, which DiM samples directly
    let cfg = DgpConfig { n_target: 150, n_aux: 20, ..DgpConfig::default() };
    let est = replicate(&cfg, 500, 1000, |d, _| data::difference_in_means(d, 0.05).unwrap());
    assert_unbiased("DiM", &est, truth(&cfg));
}

#[test]
fn nb_xonly_is_unbiased() {
    let cfg = small_dgp();
    let est = replicate(&cfg, 500, 2000, |d, _| estimators::estimate_nb_xonly(d, &DESIGN, &EstimatorOptions::default()).unwrap());
    assert_unbiased("NB-Xonly", &est, truth(&cfg));
}

#[test]
fn nb_allcov_ci_covers() {
    let cfg = small_dgp();
    let tau = truth(&cfg).value;
    let est = replicate(&cfg, 500, 3000, |d, _| estimators::estimate_nb_allcov(d, &DESIGN, &EstimatorOptions::default()).unwrap());
    let cover = est.iter().filter(|e| e.covers(tau)).count() as f64 / est.len() as f64;
    assert!((0.925..=0.975).contains(&cover), "coverage {cover}");
}

#[test]
fn full_borrowing_helps_without_drift() {
    let cfg = no_drift();
    let tau = truth(&cfg);
    let opts = EstimatorOptions::default();
    let mut fb = Vec::new();
    let mut nb = Vec::new();
    for r in 0..500 {
        let d = trial(&cfg, 4000 + r);
        fb.push(estimators::estimate_fb_xonly(&d, &DESIGN, &opts).unwrap());
        nb.push(estimators::estimate_nb_xonly(&d, &DESIGN, &opts).unwrap());
    }
    assert_unbiased("FB-Xonly", &fb, tau);
    let t = |v: &[TauEstimate]| v.iter().map(|e| e.tau_hat).collect::<Vec<_>>();
    assert!(mse(&t(&fb), tau.value) <= mse(&t(&nb), tau.value));
}

#[test]
fn full_borrowing_is_doubly_robust_in_the_outcome_model() {
    // pooled linear outcome model is correct without drift; the sampling
    // score is deliberately wrong (constant)
    let cfg = no_drift();
    let tau = truth(&cfg);
    let est = replicate(&cfg, 500, 5000, |d, _| {
        let pi = vec![0.3; d.n()];
        estimators::estimate_fb_xonly_with_scores(d, &DESIGN, &pi, &EstimatorOptions::default()).unwrap()
    });
    assert_unbiased("FB-Xonly, constant score", &est, tau);
}

#[test]
fn ivw_uses_the_extra_covariate() {
    let cfg = DgpConfig { alpha0: 1.5, ..no_drift() };
    let tau = truth(&cfg).value;
    let opts = EstimatorOptions::default();
    let mut ivw = Vec::new();
    let mut xonly = Vec::new();
    for r in 0..500 {
        let d = trial(&cfg, 6000 + r);
        ivw.push(estimators::estimate_fb_ivw(&d, &DESIGN, &opts).unwrap().tau_hat);
        xonly.push(estimators::estimate_fb_xonly(&d, &DESIGN, &opts).unwrap().tau_hat);
    }
    assert!(mse(&ivw, tau) <= mse(&xonly, tau), "{} vs {}", mse(&ivw, tau), mse(&xonly, tau));
}

#[test]
fn conformal_pvalues_are_superuniform() {
    let cfg = DgpConfig { n_target: 60, n_aux: 4, rho: 0.0, covariate_shift: false, eps: 1.0, ..DgpConfig::default() };
    let mut hits = [0usize; 3];
    let mut total = 0usize;
    let levels = [0.1, 0.2, 0.5];
    for r in 0..2000 {
        let d = trial(&cfg, 7000 + r);
        let pv = conformal::conformal_pvalues(&d, 10, r).unwrap();
        for i in d.indices_where(|x| !x.is_target()) {
            total += 1;
            for (k, a) in levels.iter().enumerate() {
                hits[k] += (pv.get(i) <= *a) as usize;
            }
        }
    }
    for (k, a) in levels.iter().enumerate() {
        let rate = hits[k] as f64 / total as f64;
        assert!(rate <= a + 0.02, "P(p <= {a}) = {rate}");
    }
}

#[test]
fn bernoulli_scheme_fraction() {
    let d = trial(&small_dgp(), 1);
    let scheme = RandomizationScheme::Bernoulli { p: 0.5 };
    let target = d.target_indices();
    let mut frac = 0.0;
    for s in 0..2000 {
        let a = frt::rerandomize_target(&d, &scheme, s).unwrap();
        frac += target.iter().filter(|&&i| a[i] == 1).count() as f64 / target.len() as f64;
    }
    assert!((frac / 2000.0 - 0.5).abs() <= 0.03);
}

#[test]
fn frt_with_difference_in_means_is_valid() {
    let cfg = DgpConfig { n_target: 40, n_aux: 10, sharp_null: true, ..DgpConfig::default() };
    let stat = |d: &StudyDataset, a: &[u8], _s: u64| -> rsate::Result<f64> {
        let mut s = [0.0; 2];
        let mut c = [0.0; 2];
        for (i, r) in d.records().iter().enumerate() {
            if r.is_target() {
                s[a[i] as usize] += r.outcome;
                c[a[i] as usize] += 1.0;
            }
        }
        Ok(s[1] / c[1] - s[0] / c[0])
    };
    let mut rejections = 0;
    for r in 0..1000u64 {
        let d = trial(&cfg, 8000 + r);
        let scheme = RandomizationScheme::complete_observed(&d);
        let res = frt::frt_pvalue(&d, &stat, "DiM", &scheme, 500, Sided::Two, r).unwrap();
        rejections += (res.p_value() <= 0.05) as usize;
    }
    assert!(rejections as f64 / 1000.0 <= 0.07, "{rejections} rejections");
}

#[test]
fn bias_of_labelled_auxiliary_controls() {
    // no U signal, so biased and clean records differ only by the bias
    let cfg = DgpConfig { alpha0: 0.0, alpha1: Some(0.0), b0: 6.0, b1: 10.0, rho: 0.5, ..small_dgp() };
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for r in 0..20 {
        let t = sim::generate_trial(&cfg, 9000 + r).unwrap();
        for (i, rec) in t.dataset.records().iter().enumerate() {
            if !rec.is_target() && rec.treatment == 0 {
                rows.push(vec![rec.x[0], rec.x[1], t.biased[i] as u8 as f64]);
                y.push(rec.outcome);
            }
        }
    }
    let beta = normal_equations(&rows, &y);
    assert!((beta[3] + 6.0).abs() <= 0.3, "bias coefficient {}", beta[3]);
}

/// E[X | target] by quadrature over the standard normal, for independent X.
fn target_mean_x(cfg: &DgpConfig) -> [f64; 2] {
    let h = 0.02;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    let mut a = -8.0;
    while a <= 8.0 {
        let mut b = -8.0;
        while b <= 8.0 {
            let w = (-(a * a + b * b) / 2.0f64).exp() * cfg.sampling_prob(&[a, b]);
            z += w;
            m1 += w * a;
            m2 += w * b;
            b += h;
        }
        a += h;
    }
    [m1 / z, m2 / z]
}

#[test]
fn true_effect_matches_closed_form() {
    let cfg = DgpConfig { covariates: CovariateScenario::Independent, ..DgpConfig::default() };
    let mc = sim::true_rsate(&cfg, 1_000_000, 3).unwrap();
    let ex = target_mean_x(&cfg);
    // U is independent of X, so its target mean stays at 2
    let closed = (cfg.beta1[0] - cfg.beta0[0])
        + ex[0] * (cfg.beta1[1] - cfg.beta0[1])
        + ex[1] * (cfg.beta1[2] - cfg.beta0[2])
        + 2.0 * (cfg.alpha1() - cfg.alpha0);
    assert!((mc.value - closed).abs() <= 3.0 * mc.mc_se, "{} vs {closed}", mc.value);

    let other = sim::true_rsate(&cfg, 1_000_000, 4).unwrap();
    assert!((mc.value - other.value).abs() <= 4.0 * (mc.mc_se.powi(2) + other.mc_se.powi(2)).sqrt());
}

#[test]
fn signal_ratio_grows_with_observed_signal() {
    let ratios: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&c| {
            let b = DgpConfig::default().beta0.map(|v| v * c);
            sim::signal_ratio(&DgpConfig { beta0: b, ..DgpConfig::default() }, 200_000, 5).unwrap().value
        })
        .collect();
    assert!(ratios[0] < ratios[1] && ratios[1] < ratios[2], "{ratios:?}");
}

fn two_region_trial(cfg: &DgpConfig, seed: u64, rho3: f64, b3: f64) -> sim::SimTrial {
    let n = if cfg.n_target >= 600 { 500 } else { 200 };
    let regions = [
        AuxRegionSpec { label: 2, n, rho: 0.0, b0: 0.0, b1: 0.0 },
        AuxRegionSpec { label: 3, n, rho: rho3, b0: b3, b1: b3 },
    ];
    sim::generate_multiregion_trial(cfg, &regions, seed).unwrap()
}

fn disjoint_map() -> RegionCovariateMap {
    let mut m = std::collections::BTreeMap::new();
    m.insert(2, vec!["X1".to_string()]);
    m.insert(3, vec!["X2".to_string()]);
    RegionCovariateMap { shared_of: m }
}

#[test]
fn region_estimates_are_unbiased() {
    let cfg = DgpConfig { n_target: 150, covariate_shift: false, ..DgpConfig::default() };
    let tau = truth(&cfg);
    let mut per = [Vec::new(), Vec::new()];
    for r in 0..300 {
        let d = two_region_trial(&cfg, 10_000 + r, 0.0, 0.0).dataset;
        let (re, _) = multiregion::fb_ivw_by_region(&d, &DESIGN, &disjoint_map(), &EstimatorOptions::default()).unwrap();
        per[0].push(re.tau_hats[0]);
        per[1].push(re.tau_hats[1]);
    }
    for v in &per {
        let (m, se) = mean_se(v);
        assert!((m - tau.value).abs() <= 3.0 * (se * se + tau.mc_se * tau.mc_se).sqrt(), "{m} vs {}", tau.value);
    }
}

#[test]
fn power_trial_shape() {
    // a dataset shaped like the motivating trial: 7 shared covariates, one
    // target-only flag, 69 target and 576 auxiliary patients
    let mut rng = seed::rng(11);
    let shared: Vec<String> = (1..=7).map(|k| format!("X{k}")).collect();
    let schema = CovariateSchema::new(shared.clone(), vec!["ECOG".to_string()]);
    let mut recs = Vec::new();
    for i in 0..(69 + 576) {
        let target = i < 69;
        let shift = if target { 0.2 } else { 0.0 };
        let x: Vec<f64> = (0..7).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); v + shift }).collect();
        recs.push(TrialRecord {
            region: if target { 1 } else { 0 },
            treatment: rng.random_bool(if target { 39.0 / 69.0 } else { 0.5 }) as u8,
            outcome: x.iter().sum::<f64>() + rng.random::<f64>(),
            x,
            u: target.then(|| vec![rng.random_bool(0.5) as u8 as f64]),
        });
    }
    let ds = StudyDataset::new(schema, recs).unwrap();
    let fit = estimators::fit_sampling_model(&ds, &EstimatorOptions::default()).unwrap();
    let score: Vec<f64> = ds.records().iter().map(|r| fit.predict_row(&r.x)).collect();
    let matched = data::nn_match(&ds, 4, &score).unwrap();
    assert_eq!(matched.n_target(), 69);
    assert!(matched.n_aux() <= 276);
    assert!(matched.n_aux() >= 250, "retained {}", matched.n_aux());

    let mut buf = Vec::new();
    data::write_dataset(&matched, &mut buf).unwrap();
    let back = data::read_dataset(&buf[..], ds.schema()).unwrap();
    assert_eq!(back.n(), 69 + matched.n_aux());
    assert_eq!(back.n_target(), 69);
}

fn pipeline_config() -> CsbConfig {
    CsbConfig::default()
}

#[test]
#[ignore = "reruns the selective pipeline 200 times"]
fn selected_sets_exclude_biased_records() {
    let cfg = DgpConfig { rho: 0.5, b0: 6.0, b1: 10.0, ..small_dgp() };
    let mut frac = Vec::new();
    for r in 0..200 {
        let t = sim::generate_trial(&cfg, 11_000 + r).unwrap();
        let est = csb::csb_pipeline(&t.dataset, &DESIGN, &pipeline_config(), r).unwrap();
        let b = est.borrowed_indices.unwrap();
        let all: Vec<usize> = b[0].iter().chain(&b[1]).copied().collect();
        if !all.is_empty() {
            frac.push(all.iter().filter(|&&i| t.biased[i]).count() as f64 / all.len() as f64);
        }
    }
    let avg = frac.iter().sum::<f64>() / frac.len() as f64;
    assert!(avg <= 0.10, "average biased fraction {avg}");
}

fn chosen_thresholds(cfg: &DgpConfig, base: u64) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..200 {
        let d = trial(cfg, base + r);
        let est = csb::csb_pipeline(&d, &DESIGN, &pipeline_config(), r).unwrap();
        out.extend(est.gamma.unwrap());
    }
    out
}

#[test]
#[ignore = "reruns the selective pipeline 200 times; last run gave a share of 0.66, below the 0.70 target"]
fn thresholds_without_drift_borrow_everything() {
    let g = chosen_thresholds(&no_drift(), 12_000);
    let share = g.iter().filter(|&&v| v == 0.0).count() as f64 / g.len() as f64;
    assert!(share >= 0.7, "share of gamma = 0: {share}");
}

#[test]
#[ignore = "reruns the selective pipeline 200 times"]
fn thresholds_under_heavy_drift_borrow_little() {
    let g = chosen_thresholds(&DgpConfig { rho: 1.0, b0: 8.0, b1: 8.0, ..small_dgp() }, 13_000);
    let share = g.iter().filter(|&&v| v >= 0.5).count() as f64 / g.len() as f64;
    assert!(share >= 0.7, "share of gamma >= 0.5: {share}");
}

#[test]
#[ignore = "reruns the selective pipeline 200 times at full size"]
fn pipeline_matches_full_borrowing_without_drift() {
    let cfg = DgpConfig { rho: 0.0, ..DgpConfig::default() };
    let tau = truth(&cfg).value;
    let (mut p, mut f) = (Vec::new(), Vec::new());
    for r in 0..200 {
        let d = trial(&cfg, 14_000 + r);
        p.push(csb::csb_pipeline(&d, &DESIGN, &pipeline_config(), r).unwrap().tau_hat);
        f.push(estimators::estimate_fb_ivw(&d, &DESIGN, &EstimatorOptions::default()).unwrap().tau_hat);
    }
    assert!(mse(&p, tau) <= 1.1 * mse(&f, tau), "{} vs {}", mse(&p, tau), mse(&f, tau));
}

#[test]
#[ignore = "reruns the selective pipeline 200 times"]
fn pipeline_matches_no_borrowing_under_huge_bias() {
    let cfg = DgpConfig { rho: 1.0, b0: 20.0, b1: 20.0, ..small_dgp() };
    let tau = truth(&cfg).value;
    let (mut p, mut nb) = (Vec::new(), Vec::new());
    for r in 0..200 {
        let d = trial(&cfg, 15_000 + r);
        p.push(csb::csb_pipeline(&d, &DESIGN, &pipeline_config(), r).unwrap().tau_hat);
        nb.push(estimators::estimate_nb_allcov(&d, &DESIGN, &EstimatorOptions::default()).unwrap().tau_hat);
    }
    assert!(mse(&p, tau) <= 1.1 * mse(&nb, tau), "{} vs {}", mse(&p, tau), mse(&nb, tau));
}

#[test]
#[ignore = "reruns the region-wise selective pipeline 200 times at full size; last run gave an MSE ratio of 1.23, above the 1.1 target"]
fn region_selection_without_drift_matches_full_combination() {
    let cfg = DgpConfig { covariate_shift: false, ..DgpConfig::default() };
    let tau = truth(&cfg).value;
    let (mut sel, mut full) = (Vec::new(), Vec::new());
    for r in 0..200 {
        let d = two_region_trial(&cfg, 16_000 + r, 0.0, 0.0).dataset;
        sel.push(multiregion::select_by_region(&d, &DESIGN, &disjoint_map(), &pipeline_config(), r).unwrap().tau_hat);
        full.push(
            multiregion::estimate_fb_ivw_multiregion(&d, &DESIGN, &disjoint_map(), &EstimatorOptions::default()).unwrap().tau_hat,
        );
    }
    assert!(mse(&sel, tau) <= 1.1 * mse(&full, tau), "{} vs {}", mse(&sel, tau), mse(&full, tau));
}

#[test]
#[ignore = "reruns the region-wise selective pipeline 200 times"]
fn region_selection_avoids_a_biased_region() {
    let cfg = DgpConfig { n_target: 150, covariate_shift: false, bias_arms: BiasArms::Both, ..DgpConfig::default() };
    let mut frac = Vec::new();
    for r in 0..200 {
        let t = two_region_trial(&cfg, 17_000 + r, 1.0, 8.0);
        let est = multiregion::select_by_region(&t.dataset, &DESIGN, &disjoint_map(), &pipeline_config(), r).unwrap();
        let b = est.borrowed_indices.unwrap();
        let n3 = t.dataset.indices_where(|x| x.region == 3).len() as f64;
        let sel3 = b[0].iter().chain(&b[1]).filter(|&&i| t.dataset.record(i).region == 3).count() as f64;
        frac.push(sel3 / n3);
    }
    let avg = frac.iter().sum::<f64>() / frac.len() as f64;
    assert!(avg <= 0.2, "selected fraction of the biased region {avg}");
}
