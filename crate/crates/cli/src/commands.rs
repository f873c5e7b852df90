//! Subcommand implementations.

use std::path::Path;

use rsate::conformal::{self, PValueRow};
use rsate::csb::{self, CsbVariant, MseRow};
use rsate::data::{self, StudyDataset};
use rsate::estimators::{self, EstimateRecord};
use rsate::frt::{self, FrtResult, RandomizationScheme};
use rsate::methods::Method;
use rsate::models::Predictor;
use rsate::sim::{self, ScenarioResult};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::report::{self, embedded_config};
use crate::CliError;

fn load(cfg: &RunConfig) -> Result<StudyDataset, CliError> {
    let path = cfg.data_path()?;
    let ds = data::load_dataset(path, &cfg.data.schema()).map_err(|e| match e {
        rsate::Error::Io(e) => CliError::Input(format!("cannot read {}: {e}", path.display())),
        e => e.into(),
    })?;
    for w in data::validate(&ds) {
        log::warn!("{}: {w}", path.display());
    }
    log::info!("loaded {} records ({} target, {} auxiliary)", ds.n(), ds.n_target(), ds.n_aux());
    Ok(ds)
}

#[derive(Debug, Serialize)]
struct CurveReport {
    method: String,
    gamma: [f64; 2],
    rows: Vec<MseRow>,
    flags: Vec<String>,
}

#[derive(Debug, Serialize)]
struct EstimateReport {
    seed: u64,
    config: serde_json::Value,
    estimates: Vec<EstimateRecord>,
    curves: Vec<CurveReport>,
    pvalues: Vec<PValueRow>,
}

pub fn estimate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let methods = Method::parse_list(&cfg.estimate.methods)?;
    let ds = load(cfg)?;
    let ctx = cfg.method_context()?;
    let mut estimates = Vec::new();
    let mut curves = Vec::new();
    let mut pvalues = Vec::new();
    for m in methods {
        let est = match m {
            Method::CsbIvw | Method::CsbXonly => {
                let variant = if m == Method::CsbIvw { CsbVariant::Ivw } else { CsbVariant::Xonly };
                let out = csb::csb_pipeline_detailed(&ds, &cfg.design, &cfg.csb_config(variant), seed)?;
                if pvalues.is_empty() {
                    pvalues = out.pvalues.rows(&ds);
                }
                let gamma = out.estimate.gamma.unwrap_or([f64::NAN; 2]);
                let flags = out.curves.iter().flat_map(|c| c.flags.iter().cloned()).collect();
                let rows = out.curves.iter().flat_map(|c| c.rows()).collect();
                curves.push(CurveReport { method: m.tag().into(), gamma, rows, flags });
                out.estimate
            }
            _ => m.run(&ds, &ctx, seed)?,
        };
        log::info!("{m}: {:.4} (se {:.4})", est.tau_hat, est.se);
        estimates.push(est.to_record(cfg.estimate.include_indices));
    }
    let dir = report::prepare_dir(cfg)?;
    let rep = EstimateReport { seed, config: embedded_config(cfg), estimates, curves, pvalues };
    report::write_json(&dir.join("estimates.json"), &rep)
}

#[derive(Debug, Serialize)]
struct FrtEntry {
    #[serde(flatten)]
    result: FrtResult,
    /// Normal-approximation p-value of the same estimator on the observed data.
    p_asymptotic: f64,
}

#[derive(Debug, Serialize)]
struct FrtReport {
    seed: u64,
    config: serde_json::Value,
    scheme: Option<RandomizationScheme>,
    tests: Vec<FrtEntry>,
}

pub fn frt(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let stats = Method::parse_list(&cfg.frt.statistics)?;
    let ds = load(cfg)?;
    let ctx = cfg.method_context()?;
    let scheme = cfg.frt.scheme.clone().unwrap_or_else(|| RandomizationScheme::complete_observed(&ds));
    let mut tests = Vec::new();
    for m in stats {
        let stat = m.statistic(&ctx);
        let result = if cfg.frt.exhaustive {
            let n_treated = ds.target_arm_counts()[1];
            frt::frt_exhaustive(&ds, &stat, m.tag(), n_treated, cfg.frt.enumeration_limit, cfg.frt.sided, seed)?
        } else {
            frt::frt_pvalue(&ds, &stat, m.tag(), &scheme, cfg.frt.b, cfg.frt.sided, seed)?
        };
        let p_asymptotic = m.run(&ds, &ctx, frt::observed_statistic_seed(seed))?.p_value();
        log::info!("{m}: randomization p = {:.4}, asymptotic p = {p_asymptotic:.4}", result.p_value());
        let result = if cfg.frt.include_draws { result } else { result.without_draws() };
        tests.push(FrtEntry { result, p_asymptotic });
    }
    let dir = report::prepare_dir(cfg)?;
    let scheme = (!cfg.frt.exhaustive).then_some(scheme);
    let rep = FrtReport { seed, config: embedded_config(cfg), scheme, tests };
    report::write_json(&dir.join("frt.json"), &rep)
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    result: ScenarioResult,
}

/// Everything a scenario result depends on.
fn fingerprint(cfg: &RunConfig, seed: u64, index: usize, scenario: &sim::Scenario) -> String {
    let s = &cfg.simulate;
    serde_json::json!({
        "seed": seed,
        "index": index,
        "scenario": scenario,
        "n_rep": s.n_rep,
        "methods": s.methods,
        "truth_mc": s.truth_mc,
        "frt_b": s.frt_b,
        "frt_sided": s.frt_sided,
        "design": cfg.design,
        "estimator": cfg.estimator,
        "conformal": cfg.conformal,
        "csb": cfg.csb,
        "regions": cfg.regions,
    })
    .to_string()
}

fn read_checkpoint(path: &Path, fp: &str) -> Option<ScenarioResult> {
    let text = std::fs::read_to_string(path).ok()?;
    match serde_json::from_str::<Checkpoint>(&text) {
        Ok(c) if c.fingerprint == fp => Some(c.result),
        Ok(_) => {
            log::warn!("{} belongs to a different run; recomputing", path.display());
            None
        }
        Err(e) => {
            log::warn!("{} is unreadable ({e}); recomputing", path.display());
            None
        }
    }
}

#[derive(Debug, Serialize)]
struct SimulateReport<'a> {
    seed: u64,
    config: serde_json::Value,
    rows: &'a [sim::MetricsRow],
}

pub fn simulate(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let sim_cfg = cfg.sim_config()?;
    sim_cfg.check()?;
    let scenarios = cfg.scenarios();
    for s in &scenarios {
        s.dgp.check()?;
    }
    let dir = report::prepare_dir(cfg)?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut rows = Vec::new();
    for (i, s) in scenarios.iter().enumerate() {
        let path = ckpt_dir.join(format!("scenario-{i:03}.json"));
        let fp = fingerprint(cfg, seed, i, s);
        let cached = if resume { read_checkpoint(&path, &fp) } else { None };
        let result = match cached {
            Some(r) => {
                log::info!("scenario {} restored from {}", s.label, path.display());
                r
            }
            None => {
                let start = std::time::Instant::now();
                let r = sim::run_scenario(i, s, &sim_cfg, seed)?;
                log::info!("scenario {} finished in {:.1?}", s.label, start.elapsed());
                report::write_json(&path, &Checkpoint { fingerprint: fp, result: r.clone() })?;
                r
            }
        };
        rows.extend(result.rows);
    }
    let table = sim::MetricsTable { rows, seed };
    report::write_csv(&dir.join("metrics.csv"), cfg, seed, |w| table.write_csv(w))?;
    report::write_json(&dir.join("metrics.json"), &SimulateReport { seed, config: embedded_config(cfg), rows: &table.rows })
}

pub fn matching(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let ds = load(cfg)?;
    let fit = estimators::fit_sampling_model(&ds, &cfg.estimator)?;
    let score: Vec<f64> = ds.records().iter().map(|r| fit.predict_row(&r.x)).collect();
    let matched = data::nn_match(&ds, cfg.matching.ratio, &score)?;
    log::info!("kept {} of {} auxiliary records", matched.n_aux(), ds.n_aux());
    let dir = report::prepare_dir(cfg)?;
    report::write_csv(&dir.join("matched.csv"), cfg, seed, |w| data::write_dataset(&matched, w))
}

pub fn pvalues(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let ds = load(cfg)?;
    let table = conformal::conformal_pvalues(&ds, cfg.conformal.folds, seed)?;
    for f in &table.flags {
        log::warn!("{f}");
    }
    let dir = report::prepare_dir(cfg)?;
    report::write_csv(&dir.join("pvalues.csv"), cfg, seed, |w| table.write_csv(&ds, w))
}

#[derive(Debug, Serialize)]
struct LabelRow {
    record_index: usize,
    region: i64,
    biased: bool,
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let g = &cfg.generate;
    let trial = if g.regions.is_empty() {
        sim::generate_trial(&g.dgp, seed)?
    } else {
        sim::generate_multiregion_trial(&g.dgp, &g.regions, seed)?
    };
    let dir = report::prepare_dir(cfg)?;
    let ds = &trial.dataset;
    report::write_csv(&dir.join("data.csv"), cfg, seed, |w| data::write_dataset(ds, w))?;
    report::write_csv(&dir.join("labels.csv"), cfg, seed, |w| {
        let mut out = csv::Writer::from_writer(w);
        for (i, r) in ds.records().iter().enumerate() {
            out.serialize(LabelRow { record_index: i, region: r.region, biased: trial.biased[i] })?;
        }
        out.flush()?;
        Ok(())
    })
}
