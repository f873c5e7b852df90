//! Fisher randomization tests of the sharp null of no effect in the target
//! region, conditional on the auxiliary-region assignments.
//!
//! Under the sharp null every target outcome is the same under either arm,
//! so a re-randomized dataset keeps the observed outcomes and only the
//! target assignments change. The test statistic is recomputed from scratch
//! for every draw, which makes the test valid for data-adaptive statistics
//! such as the selective-borrowing pipeline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::StudyDataset;
use crate::error::{Error, Result};
use crate::seed::{self, stage};

/// Default number of reachable assignments up to which exhaustive
/// enumeration is allowed.
pub const DEFAULT_ENUMERATION_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCount {
    pub stratum: i64,
    pub treated: usize,
}

/// Law of the target-region assignment vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RandomizationScheme {
    /// Independent coin flips.
    Bernoulli { p: f64 },
    /// Exactly `n_treated` treated target records.
    Complete { n_treated: usize },
    /// Complete randomization within strata. `strata` holds one label per
    /// record of the dataset (auxiliary entries are ignored).
    StratifiedComplete { strata: Vec<i64>, treated: Vec<StratumCount> },
}

impl RandomizationScheme {
    /// Complete randomization with the observed number of treated target records.
    pub fn complete_observed(dataset: &StudyDataset) -> Self {
        RandomizationScheme::Complete { n_treated: dataset.target_arm_counts()[1] }
    }

    pub fn check(&self, dataset: &StudyDataset) -> Result<()> {
        let m = dataset.n_target();
        match self {
            RandomizationScheme::Bernoulli { p } => {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(Error::precondition(format!("Bernoulli probability {p} is not in (0, 1)")));
                }
            }
            RandomizationScheme::Complete { n_treated } => {
                if *n_treated > m {
                    return Err(Error::precondition(format!("{n_treated} treated requested among {m} target records")));
                }
            }
            RandomizationScheme::StratifiedComplete { strata, treated } => {
                if strata.len() != dataset.n() {
                    return Err(Error::dimension("stratum labels must cover every record"));
                }
                let sizes = self.target_strata(dataset);
                for c in treated {
                    let size = sizes.get(&c.stratum).map_or(0, |v| v.len());
                    if c.treated > size {
                        return Err(Error::precondition(format!(
                            "stratum {} has {size} target records, {} treated requested",
                            c.stratum, c.treated
                        )));
                    }
                }
                for s in sizes.keys() {
                    if !treated.iter().any(|c| c.stratum == *s) {
                        return Err(Error::precondition(format!("no treated count given for stratum {s}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn target_strata(&self, dataset: &StudyDataset) -> BTreeMap<i64, Vec<usize>> {
        let mut out: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        if let RandomizationScheme::StratifiedComplete { strata, .. } = self {
            for i in dataset.target_indices() {
                out.entry(strata[i]).or_default().push(i);
            }
        }
        out
    }
}

/// New assignment vector: auxiliary entries as observed, target entries
/// drawn from the scheme.
pub fn rerandomize_target(dataset: &StudyDataset, scheme: &RandomizationScheme, seed: u64) -> Result<Vec<u8>> {
    scheme.check(dataset)?;
    let mut rng = seed::rng(seed);
    Ok(draw_assignment(dataset, scheme, &mut rng))
}

fn draw_assignment(dataset: &StudyDataset, scheme: &RandomizationScheme, rng: &mut seed::Rng) -> Vec<u8> {
    let mut a = dataset.treatments();
    let target = dataset.target_indices();
    let mut complete = |rows: &[usize], n1: usize, rng: &mut seed::Rng| {
        let mut rows = rows.to_vec();
        rows.shuffle(rng);
        for (k, &i) in rows.iter().enumerate() {
            a[i] = (k < n1) as u8;
        }
    };
    match scheme {
        RandomizationScheme::Bernoulli { p } => {
            for &i in &target {
                a[i] = rng.random_bool(*p) as u8;
            }
        }
        RandomizationScheme::Complete { n_treated } => complete(&target, *n_treated, rng),
        RandomizationScheme::StratifiedComplete { treated, .. } => {
            for (s, rows) in scheme.target_strata(dataset) {
                let n1 = treated.iter().find(|c| c.stratum == s).map_or(0, |c| c.treated);
                complete(&rows, n1, rng);
            }
        }
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sided {
    One,
    #[default]
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrtResult {
    pub statistic: String,
    pub t_obs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub draws: Vec<f64>,
    pub p_two_sided: f64,
    pub p_one_sided: f64,
    pub sided: Sided,
    /// Number of randomizations compared against the observed statistic.
    pub b: usize,
    pub seed: u64,
    pub failed_draws: usize,
    /// Set when every reachable assignment was enumerated (no add-one).
    pub exhaustive: bool,
    pub flags: Vec<String>,
}

impl FrtResult {
    /// The p-value of the requested sidedness.
    pub fn p_value(&self) -> f64 {
        match self.sided {
            Sided::One => self.p_one_sided,
            Sided::Two => self.p_two_sided,
        }
    }

    pub fn without_draws(mut self) -> Self {
        self.draws.clear();
        self
    }
}

/// Seed handed to the statistic for draw `b`.
pub fn draw_statistic_seed(master: u64, b: usize) -> u64 {
    seed::derive(master, &[stage::FRT, b as u64, stage::PIPELINE])
}

/// Seed handed to the statistic for the observed assignment.
pub fn observed_statistic_seed(master: u64) -> u64 {
    seed::derive(master, &[stage::OBSERVED, stage::PIPELINE])
}

fn tally(t_obs: f64, draws: &[f64]) -> (usize, usize) {
    let two = draws.iter().filter(|t| t.abs() >= t_obs.abs()).count();
    let one = draws.iter().filter(|&&t| t >= t_obs).count();
    (two, one)
}

fn evaluate_draws<S>(dataset: &StudyDataset, statistic: &S, assignments: Vec<(Vec<u8>, u64)>) -> (Vec<f64>, Vec<String>)
where
    S: Fn(&StudyDataset, &[u8], u64) -> Result<f64> + Sync,
{
    let values: Vec<Result<f64>> = assignments.into_par_iter().map(|(a, s)| statistic(dataset, &a, s)).collect();
    let mut flags = Vec::new();
    let draws = values
        .into_iter()
        .enumerate()
        .map(|(b, v)| match v {
            Ok(t) if !t.is_nan() => t,
            Ok(_) => {
                flags.push(format!("draw {b}: statistic was NaN, counted as extreme"));
                f64::INFINITY
            }
            Err(e) => {
                flags.push(format!("draw {b}: {e}; counted as extreme"));
                f64::INFINITY
            }
        })
        .collect();
    (draws, flags)
}

/// Monte Carlo randomization test with `b` draws and add-one p-values.
pub fn frt_pvalue<S>(
    dataset: &StudyDataset,
    statistic: &S,
    tag: &str,
    scheme: &RandomizationScheme,
    b: usize,
    sided: Sided,
    seed: u64,
) -> Result<FrtResult>
where
    S: Fn(&StudyDataset, &[u8], u64) -> Result<f64> + Sync,
{
    if b == 0 {
        return Err(Error::precondition("at least one randomization draw is required"));
    }
    scheme.check(dataset)?;
    let observed = dataset.treatments();
    let t_obs = statistic(dataset, &observed, observed_statistic_seed(seed))?;
    if t_obs.is_nan() {
        return Err(Error::Numerical("observed statistic is NaN".into()));
    }
    let assignments: Vec<(Vec<u8>, u64)> = (0..b)
        .map(|k| {
            let mut rng = seed::rng_at(seed, &[stage::FRT, k as u64]);
            (draw_assignment(dataset, scheme, &mut rng), draw_statistic_seed(seed, k))
        })
        .collect();
    let (draws, flags) = evaluate_draws(dataset, statistic, assignments);
    let (two, one) = tally(t_obs, &draws);
    Ok(FrtResult {
        statistic: tag.to_string(),
        t_obs,
        p_two_sided: (1 + two) as f64 / (b + 1) as f64,
        p_one_sided: (1 + one) as f64 / (b + 1) as f64,
        sided,
        b,
        seed,
        failed_draws: flags.len(),
        exhaustive: false,
        flags,
        draws,
    })
}

fn combinations(rows: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(rows: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..rows.len() {
            if rows.len() - i < k - cur.len() {
                break;
            }
            cur.push(rows[i]);
            rec(rows, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(rows, k, 0, &mut Vec::new(), &mut out);
    out
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut c: usize = 1;
    for i in 0..k {
        c = c.checked_mul(n - i)? / (i + 1);
    }
    Some(c)
}

/// Exact randomization test over every complete-randomization assignment
/// of the target region; the observed assignment is one of them, so no
/// add-one correction is applied.
pub fn frt_exhaustive<S>(
    dataset: &StudyDataset,
    statistic: &S,
    tag: &str,
    n_treated: usize,
    limit: usize,
    sided: Sided,
    seed: u64,
) -> Result<FrtResult>
where
    S: Fn(&StudyDataset, &[u8], u64) -> Result<f64> + Sync,
{
    let target = dataset.target_indices();
    if n_treated > target.len() {
        return Err(Error::precondition(format!("{n_treated} treated requested among {} target records", target.len())));
    }
    let count = binomial(target.len(), n_treated).unwrap_or(usize::MAX);
    if count > limit {
        return Err(Error::precondition(format!("{count} reachable assignments exceed the enumeration limit {limit}")));
    }
    let observed = dataset.treatments();
    let t_obs = statistic(dataset, &observed, observed_statistic_seed(seed))?;
    let base = dataset.treatments();
    let assignments: Vec<(Vec<u8>, u64)> = combinations(&target, n_treated)
        .into_iter()
        .enumerate()
        .map(|(k, treated)| {
            let mut a = base.clone();
            for &i in &target {
                a[i] = 0;
            }
            for i in treated {
                a[i] = 1;
            }
            (a, draw_statistic_seed(seed, k))
        })
        .collect();
    let b = assignments.len();
    let (draws, flags) = evaluate_draws(dataset, statistic, assignments);
    let (two, one) = tally(t_obs, &draws);
    Ok(FrtResult {
        statistic: tag.to_string(),
        t_obs,
        p_two_sided: two as f64 / b as f64,
        p_one_sided: one as f64 / b as f64,
        sided,
        b,
        seed,
        failed_draws: flags.len(),
        exhaustive: true,
        flags,
        draws,
    })
}
