//! Simulation studies: the multi-regional trial generator, Monte Carlo
//! truth and signal-strength metrics, and the replication runner that turns
//! repeated estimates into MSE, coverage and rejection-rate tables.
//!
//! Covariates `(X1, X2, U)` are multivariate normal with mean `(0, 0, 2)`.
//! Patients are drawn from a superpopulation and kept until the requested
//! number of target and auxiliary patients is reached; with covariate shift
//! the region indicator follows `pi(X) = pi1(X) / (pi1(X) + pi0(X))`.

use nalgebra::{Cholesky, Matrix3, Vector3};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateSchema, StudyDataset, TrialRecord, TARGET_REGION};
use crate::error::{Error, Result};
use crate::frt::{self, RandomizationScheme, Sided};
use crate::methods::{Method, MethodContext};
use crate::models::{self, sigmoid};
use crate::seed::{self, stage};

/// Label given to the auxiliary region in single-auxiliary-region trials.
pub const AUX_REGION: i64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateScenario {
    Independent,
    /// Each of X1 and X2 has covariance 0.5 with U.
    #[default]
    Correlated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasArms {
    #[default]
    Both,
    ControlOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_target: usize,
    pub n_aux: usize,
    pub covariates: CovariateScenario,
    /// When false, region membership is independent of the covariates.
    pub covariate_shift: bool,
    pub eta1: [f64; 2],
    pub eta1_offset: f64,
    pub eta0: [f64; 2],
    pub eta0_offset: f64,
    pub treat_p: f64,
    /// (intercept, X1, X2) for the control arm.
    pub beta0: [f64; 3],
    /// (intercept, X1, X2) for the treated arm.
    pub beta1: [f64; 3],
    pub alpha0: f64,
    /// Defaults to twice `alpha0`.
    pub alpha1: Option<f64>,
    /// Auxiliary noise level.
    pub eps: f64,
    /// Whether `eps` is a variance (otherwise a standard deviation).
    pub eps_is_variance: bool,
    pub target_noise_var: f64,
    pub b0: f64,
    pub b1: f64,
    /// Fraction of auxiliary patients carrying the hidden bias.
    pub rho: f64,
    pub bias_arms: BiasArms,
    /// Both potential outcomes of every patient follow the control-arm
    /// model with one shared noise draw, so the target effect is exactly 0.
    pub sharp_null: bool,
    /// Constant added to every treated potential outcome.
    pub effect: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_target: 600,
            n_aux: 1000,
            covariates: CovariateScenario::Correlated,
            covariate_shift: true,
            eta1: [0.5, 0.3],
            eta1_offset: 0.6,
            eta0: [-0.5, -0.2],
            eta0_offset: -0.4,
            treat_p: 0.5,
            beta0: [0.0, 2.0, 2.0],
            beta1: [3.0, 3.0, 3.0],
            alpha0: 1.0,
            alpha1: None,
            eps: 1.0,
            eps_is_variance: true,
            target_noise_var: 1.0,
            b0: 6.0,
            b1: 10.0,
            rho: 0.5,
            bias_arms: BiasArms::Both,
            sharp_null: false,
            effect: 0.0,
        }
    }
}

impl DgpConfig {
    pub fn check(&self) -> Result<()> {
        if self.n_target < 2 {
            return Err(Error::Config("n_target must be at least 2".into()));
        }
        if !(self.treat_p > 0.0 && self.treat_p < 1.0) {
            return Err(Error::Config("treat_p must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config("rho must lie in [0, 1]".into()));
        }
        if self.eps <= 0.0 || self.target_noise_var <= 0.0 {
            return Err(Error::Config("noise levels must be positive".into()));
        }
        Ok(())
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha1.unwrap_or(2.0 * self.alpha0)
    }

    /// Hidden bias of arm `a` after applying `bias_arms`.
    pub fn bias(&self, arm: u8) -> f64 {
        match (arm, self.bias_arms) {
            (0, _) => self.b0,
            (_, BiasArms::Both) => self.b1,
            (_, BiasArms::ControlOnly) => 0.0,
        }
    }

    fn aux_sd(&self) -> f64 {
        if self.eps_is_variance {
            self.eps.sqrt()
        } else {
            self.eps
        }
    }

    /// (beta, alpha) used for arm `a`.
    fn coefficients(&self, arm: u8) -> ([f64; 3], f64) {
        if arm == 1 && !self.sharp_null {
            (self.beta1, self.alpha1())
        } else {
            (self.beta0, self.alpha0)
        }
    }

    fn covariance(&self) -> Matrix3<f64> {
        match self.covariates {
            CovariateScenario::Independent => Matrix3::identity(),
            CovariateScenario::Correlated => Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.5, 0.5, 1.0),
        }
    }

    /// P(target | X) in the superpopulation.
    pub fn sampling_prob(&self, x: &[f64]) -> f64 {
        let pi1 = 1.0 - sigmoid(self.eta1[0] * x[0] + self.eta1[1] * x[1] + self.eta1_offset);
        let pi0 = 1.0 - sigmoid(self.eta0[0] * x[0] + self.eta0[1] * x[1] + self.eta0_offset);
        pi1 / (pi1 + pi0)
    }

    pub fn schema() -> CovariateSchema {
        CovariateSchema::new(["X1", "X2"], ["U"])
    }
}

/// An auxiliary region of a multi-region trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxRegionSpec {
    pub label: i64,
    pub n: usize,
    pub rho: f64,
    pub b0: f64,
    pub b1: f64,
}

/// A generated trial together with the hidden bias labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrial {
    pub dataset: StudyDataset,
    /// Per record: whether the record carries hidden bias.
    pub biased: Vec<bool>,
}

struct Superpopulation {
    chol: Matrix3<f64>,
    mean: Vector3<f64>,
}

impl Superpopulation {
    fn new(cfg: &DgpConfig) -> Result<Self> {
        let chol = Cholesky::new(cfg.covariance()).ok_or_else(|| Error::Config("covariate covariance is not positive definite".into()))?;
        Ok(Self { chol: chol.l(), mean: Vector3::new(0.0, 0.0, 2.0) })
    }

    fn draw(&self, rng: &mut seed::Rng) -> Vector3<f64> {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        self.mean + self.chol * z
    }
}

/// Covariate draws `(X1, X2, U)` accepted into the target (first) and
/// auxiliary (second) regions until both counts are met.
fn sample_regions(cfg: &DgpConfig, n_aux: usize, rng: &mut seed::Rng) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let pop = Superpopulation::new(cfg)?;
    let mut target = Vec::with_capacity(cfg.n_target);
    let mut aux = Vec::with_capacity(n_aux);
    let flat = cfg.n_target as f64 / (cfg.n_target + n_aux) as f64;
    let cap = 1000 * (cfg.n_target + n_aux) + 1_000_000;
    let mut tries = 0usize;
    while target.len() < cfg.n_target || aux.len() < n_aux {
        tries += 1;
        if tries > cap {
            return Err(Error::Numerical("superpopulation sampling did not fill both regions".into()));
        }
        let v = pop.draw(rng);
        let p = if cfg.covariate_shift { cfg.sampling_prob(&[v[0], v[1]]) } else { flat };
        if rng.random_bool(p.clamp(0.0, 1.0)) {
            if target.len() < cfg.n_target {
                target.push(v);
            }
        } else if aux.len() < n_aux {
            aux.push(v);
        }
    }
    Ok((target, aux))
}

fn outcome(cfg: &DgpConfig, v: &Vector3<f64>, arm: u8, with_u: bool, bias: f64, noise: f64) -> f64 {
    let (beta, alpha) = cfg.coefficients(arm);
    let u_term = if with_u { alpha * v[2] } else { 0.0 };
    let effect = if arm == 1 { cfg.effect } else { 0.0 };
    beta[0] + beta[1] * v[0] + beta[2] * v[1] + u_term + effect - bias + noise
}

fn build(cfg: &DgpConfig, regions: &[AuxRegionSpec], seed: u64) -> Result<SimTrial> {
    cfg.check()?;
    let n_aux: usize = regions.iter().map(|r| r.n).sum();
    let mut rng = seed::rng(seed);
    let (target, aux) = sample_regions(cfg, n_aux, &mut rng)?;
    let target_sd = cfg.target_noise_var.sqrt();
    let aux_sd = cfg.aux_sd();
    let mut records = Vec::with_capacity(cfg.n_target + n_aux);
    let mut biased = Vec::with_capacity(cfg.n_target + n_aux);
    for v in &target {
        let a = rng.random_bool(cfg.treat_p) as u8;
        let e: f64 = StandardNormal.sample(&mut rng);
        let y = outcome(cfg, v, a, true, 0.0, target_sd * e);
        records.push(TrialRecord { region: TARGET_REGION, treatment: a, outcome: y, x: vec![v[0], v[1]], u: Some(vec![v[2]]) });
        biased.push(false);
    }
    let mut offset = 0;
    for spec in regions {
        let block = &aux[offset..offset + spec.n];
        offset += spec.n;
        let n_biased = (spec.rho * spec.n as f64).round() as usize;
        let mut is_biased = vec![false; spec.n];
        for k in index::sample(&mut rng, spec.n, n_biased.min(spec.n)).into_iter() {
            is_biased[k] = true;
        }
        for (k, v) in block.iter().enumerate() {
            let a = rng.random_bool(cfg.treat_p) as u8;
            let e: f64 = StandardNormal.sample(&mut rng);
            let bias = if is_biased[k] {
                match (a, cfg.bias_arms) {
                    (0, _) => spec.b0,
                    (_, BiasArms::Both) => spec.b1,
                    (_, BiasArms::ControlOnly) => 0.0,
                }
            } else {
                0.0
            };
            let y = outcome(cfg, v, a, !is_biased[k], bias, aux_sd * e);
            records.push(TrialRecord { region: spec.label, treatment: a, outcome: y, x: vec![v[0], v[1]], u: None });
            biased.push(is_biased[k]);
        }
    }
    Ok(SimTrial { dataset: StudyDataset::new(DgpConfig::schema(), records)?, biased })
}

/// One trial with a single auxiliary region (label 0).
pub fn generate_trial(config: &DgpConfig, seed: u64) -> Result<SimTrial> {
    let spec = AuxRegionSpec { label: AUX_REGION, n: config.n_aux, rho: config.rho, b0: config.b0, b1: config.b1 };
    build(config, &[spec], seed)
}

/// One trial with several auxiliary regions; `config.n_aux`, `rho`, `b0`
/// and `b1` are replaced by the per-region values.
pub fn generate_multiregion_trial(config: &DgpConfig, regions: &[AuxRegionSpec], seed: u64) -> Result<SimTrial> {
    if regions.iter().any(|r| r.label == TARGET_REGION) {
        return Err(Error::Config("auxiliary regions cannot use the target label".into()));
    }
    build(config, regions, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloValue {
    pub value: f64,
    pub mc_se: f64,
}

const MIN_MC: usize = 100_000;

fn target_draws(cfg: &DgpConfig, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let mut c = cfg.clone();
    c.n_target = n;
    let mut rng = seed::rng(seed);
    if cfg.covariate_shift {
        let pop = Superpopulation::new(&c)?;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let v = pop.draw(&mut rng);
            if rng.random_bool(c.sampling_prob(&[v[0], v[1]])) {
                out.push(v);
            }
        }
        Ok(out)
    } else {
        let pop = Superpopulation::new(&c)?;
        Ok((0..n).map(|_| pop.draw(&mut rng)).collect())
    }
}

/// Monte Carlo value of E[Y(1) - Y(0) | target] with its standard error.
pub fn true_rsate(config: &DgpConfig, n_mc: usize, seed: u64) -> Result<MonteCarloValue> {
    if n_mc < MIN_MC {
        return Err(Error::precondition(format!("at least {MIN_MC} Monte Carlo draws are required")));
    }
    let (b1, a1) = config.coefficients(1);
    let (b0, a0) = config.coefficients(0);
    let draws = target_draws(config, n_mc, seed)?;
    let vals: Vec<f64> = draws
        .iter()
        .map(|v| (b1[0] - b0[0]) + (b1[1] - b0[1]) * v[0] + (b1[2] - b0[2]) * v[1] + (a1 - a0) * v[2] + config.effect)
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MonteCarloValue { value: mean, mc_se: (var / n).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalRatio {
    pub value: f64,
    /// Set when U carries no signal and the ratio is reported as infinite.
    pub degenerate: bool,
}

/// Ratio of the outcome variance explained by X beyond U to the variance
/// explained by U beyond X, in the target-region control arm.
pub fn signal_ratio(config: &DgpConfig, n_mc: usize, seed: u64) -> Result<SignalRatio> {
    if n_mc < MIN_MC {
        return Err(Error::precondition(format!("at least {MIN_MC} Monte Carlo draws are required")));
    }
    if config.alpha0 == 0.0 {
        return Ok(SignalRatio { value: f64::INFINITY, degenerate: true });
    }
    let draws = target_draws(config, n_mc, seed)?;
    let mut rng = seed::rng_at(seed, &[1]);
    let sd = config.target_noise_var.sqrt();
    let y: Vec<f64> = draws
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            outcome(config, v, 0, true, 0.0, sd * e)
        })
        .collect();
    let rss = |cols: &[usize]| -> Result<f64> {
        let m = nalgebra::DMatrix::from_fn(draws.len(), cols.len(), |i, j| draws[i][cols[j]]);
        Ok(models::fit_linear(&m, &y)?.residual_mse * draws.len() as f64)
    };
    let rss_x = rss(&[0, 1])?;
    let rss_u = rss(&[2])?;
    let rss_xu = rss(&[0, 1, 2])?;
    let r2_x_given_u = (rss_u - rss_xu) / rss_u;
    let r2_u_given_x = (rss_x - rss_xu) / rss_x;
    if r2_u_given_x <= 0.0 {
        return Ok(SignalRatio { value: f64::INFINITY, degenerate: true });
    }
    Ok(SignalRatio { value: r2_x_given_u / r2_u_given_x, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub dgp: DgpConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrtSettings {
    pub b: usize,
    #[serde(default)]
    pub sided: Sided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub methods: Vec<Method>,
    pub n_rep: usize,
    pub frt: Option<FrtSettings>,
    pub context: MethodContext,
    /// Monte Carlo draws for the true effect.
    pub truth_mc: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { methods: Method::SIX.to_vec(), n_rep: 500, frt: None, context: MethodContext::default(), truth_mc: 200_000 }
    }
}

impl SimConfig {
    pub fn check(&self) -> Result<()> {
        if self.n_rep < 2 {
            return Err(Error::Config("at least two replicates are required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if let Some(f) = &self.frt {
            if f.b == 0 {
                return Err(Error::Config("the randomization test needs at least one draw".into()));
            }
        }
        self.context.csb.check()
    }
}

/// One method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub rep: usize,
    pub method: Method,
    pub tau_hat: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub p_value: Option<f64>,
    pub frt_p: Option<f64>,
    pub borrowed: Option<[usize; 2]>,
    /// Borrowed records that carry hidden bias.
    pub borrowed_biased: Option<usize>,
    pub error: Option<String>,
}

/// Aggregated metrics of one method in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub covariates: CovariateScenario,
    pub n_target: usize,
    pub n_aux: usize,
    pub alpha0: f64,
    pub eps: f64,
    pub log_precision: f64,
    pub b0: f64,
    pub b1: f64,
    pub rho: f64,
    pub effect: f64,
    pub sharp_null: bool,
    pub method: Method,
    pub mse: f64,
    pub mse_pct: Option<f64>,
    pub bias: f64,
    pub coverage: f64,
    pub rejection: f64,
    pub rejection_frt: Option<f64>,
    pub n_rep: usize,
    pub n_fail: usize,
    pub tau_true: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub index: usize,
    pub tau_true: f64,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub replicates: Vec<ReplicateResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub seed: u64,
}

impl MetricsTable {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn get(&self, scenario: &str, method: Method) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.method == method)
    }
}

/// Seed of scenario `s`, from which replicate and truth seeds derive.
pub fn scenario_seed(master: u64, s: usize) -> u64 {
    seed::derive(master, &[stage::SIMULATION, s as u64])
}

fn run_replicate(
    trial: &SimTrial,
    rep: usize,
    cfg: &SimConfig,
    tau_true: f64,
    rep_seed: u64,
) -> Vec<ReplicateResult> {
    let ds = &trial.dataset;
    cfg.methods
        .iter()
        .map(|&m| {
            let mut out = ReplicateResult {
                rep,
                method: m,
                tau_hat: None,
                se: None,
                covered: None,
                p_value: None,
                frt_p: None,
                borrowed: None,
                borrowed_biased: None,
                error: None,
            };
            match m.run(ds, &cfg.context, seed::derive(rep_seed, &[stage::PIPELINE, m as u64])) {
                Ok(est) => {
                    out.tau_hat = Some(est.tau_hat);
                    out.se = Some(est.se);
                    out.covered = Some(est.covers(tau_true));
                    out.p_value = Some(est.p_value());
                    if let Some(b) = &est.borrowed_indices {
                        out.borrowed = Some([b[0].len(), b[1].len()]);
                        out.borrowed_biased = Some(b.iter().flatten().filter(|&&j| trial.biased[j]).count());
                    }
                }
                Err(e) => {
                    out.error = Some(e.to_string());
                    return out;
                }
            }
            if let Some(f) = &cfg.frt {
                let stat = m.statistic(&cfg.context);
                let scheme = RandomizationScheme::complete_observed(ds);
                match frt::frt_pvalue(ds, &stat, m.tag(), &scheme, f.b, f.sided, seed::derive(rep_seed, &[stage::FRT, m as u64])) {
                    Ok(r) => out.frt_p = Some(r.p_value()),
                    Err(e) => out.error = Some(format!("randomization test: {e}")),
                }
            }
            out
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// All replicates of one scenario, aggregated.
pub fn run_scenario(index: usize, scenario: &Scenario, cfg: &SimConfig, master: u64) -> Result<ScenarioResult> {
    cfg.check()?;
    scenario.dgp.check()?;
    let s_seed = scenario_seed(master, index);
    let truth = true_rsate(&scenario.dgp, cfg.truth_mc, seed::derive(s_seed, &[stage::TRUTH]))?;
    let tau_true = if scenario.dgp.sharp_null { scenario.dgp.effect } else { truth.value };
    let per_rep: Vec<Result<Vec<ReplicateResult>>> = (0..cfg.n_rep)
        .into_par_iter()
        .map(|r| {
            let rep_seed = seed::derive(s_seed, &[r as u64]);
            let trial = generate_trial(&scenario.dgp, seed::derive(rep_seed, &[stage::SIMULATION]))?;
            Ok(run_replicate(&trial, r, cfg, tau_true, rep_seed))
        })
        .collect();
    let mut replicates = Vec::with_capacity(cfg.n_rep * cfg.methods.len());
    for r in per_rep {
        replicates.extend(r?);
    }
    let alpha = cfg.context.csb.estimator.alpha;
    let d = &scenario.dgp;
    let mut rows: Vec<MetricsRow> = cfg
        .methods
        .iter()
        .map(|&m| {
            let ok: Vec<&ReplicateResult> = replicates.iter().filter(|r| r.method == m && r.tau_hat.is_some()).collect();
            let fails = replicates.iter().filter(|r| r.method == m && r.error.is_some()).count();
            let err = |r: &ReplicateResult| r.tau_hat.unwrap() - tau_true;
            MetricsRow {
                scenario: scenario.label.clone(),
                covariates: d.covariates,
                n_target: d.n_target,
                n_aux: d.n_aux,
                alpha0: d.alpha0,
                eps: d.eps,
                log_precision: (1.0 / d.eps).ln(),
                b0: d.b0,
                b1: d.bias(1),
                rho: d.rho,
                effect: d.effect,
                sharp_null: d.sharp_null,
                method: m,
                mse: mean(ok.iter().map(|r| err(r).powi(2))),
                mse_pct: None,
                bias: mean(ok.iter().map(|r| err(r))),
                coverage: mean(ok.iter().map(|r| r.covered.unwrap() as u8 as f64)),
                rejection: mean(ok.iter().map(|r| (r.p_value.unwrap() <= alpha) as u8 as f64)),
                rejection_frt: cfg.frt.map(|_| mean(ok.iter().filter_map(|r| r.frt_p).map(|p| (p <= alpha) as u8 as f64))),
                n_rep: ok.len(),
                n_fail: fails,
                tau_true,
                seed: s_seed,
            }
        })
        .collect();
    if let Some(base) = rows.iter().find(|r| r.method == Method::NbAllCov).map(|r| r.mse) {
        for r in rows.iter_mut() {
            r.mse_pct = Some(if r.method == Method::NbAllCov { 100.0 } else { 100.0 * r.mse / base });
        }
    }
    Ok(ScenarioResult { index, tau_true, seed: s_seed, rows, replicates })
}

pub fn run_replications(scenarios: &[Scenario], cfg: &SimConfig, master: u64) -> Result<MetricsTable> {
    let mut rows = Vec::new();
    for (i, s) in scenarios.iter().enumerate() {
        let start = std::time::Instant::now();
        let res = run_scenario(i, s, cfg, master)?;
        let fails: usize = res.rows.iter().map(|r| r.n_fail).sum();
        log::info!("scenario {} finished in {:.1?} with {fails} failures", s.label, start.elapsed());
        rows.extend(res.rows);
    }
    Ok(MetricsTable { rows, seed: master })
}

/// Scenario grid crossing auxiliary noise levels with U-coefficients.
pub fn precision_signal_grid(base: &DgpConfig, eps: &[f64], alpha0: &[f64]) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &e in eps {
        for &a in alpha0 {
            out.push(Scenario { label: format!("eps={e},alpha0={a}"), dgp: DgpConfig { eps: e, alpha0: a, alpha1: None, ..base.clone() } });
        }
    }
    out
}
